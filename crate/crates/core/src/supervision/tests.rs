use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::io::{load_supervision, read_feature_maps, save_supervision, write_feature_maps};
use super::*;
use crate::error::Error;
use crate::raster::FeatureMap;

fn table(count: usize, dim: usize, seed: u64) -> ConceptTable {
    ConceptTable::random(count, dim, 0.3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn concept_table_respects_similarity_cap() {
    let t = table(6, 16, 1);
    assert_eq!(t.len(), 6);
    for (i, a) in t.embeddings.iter().enumerate() {
        assert!((norm(a) - 1.0).abs() < 1e-12);
        for b in &t.embeddings[i + 1..] {
            assert!(dot(a, b) <= 0.3);
        }
    }
    assert_eq!(t.id_of("lamp"), Some(1));
}

#[test]
fn single_object_mask_labels_every_covered_pixel_one() {
    let spec = SceneSpec {
        objects: 1,
        concepts: 1,
        views: 1,
        ..SceneSpec::named("tiny").unwrap()
    };
    let data = generate_synthetic(&spec, 3).unwrap();
    let view = &data.supervision.views[0];
    let labels: BTreeSet<u32> = view.mask.iter().copied().collect();
    assert_eq!(labels, BTreeSet::from([0, 1]));
    assert_eq!(view.mask_concept, BTreeMap::from([(1, 0)]));
}

#[test]
fn generation_is_bitwise_deterministic() {
    let spec = SceneSpec::named("tiny").unwrap();
    let a = generate_synthetic(&spec, 11).unwrap();
    let b = generate_synthetic(&spec, 11).unwrap();
    assert_eq!(a.supervision, b.supervision);
    assert_eq!(a.gt_scene, b.gt_scene);
    assert_eq!(a.init_scene, b.init_scene);
    assert_eq!(a.concepts, b.concepts);
    let c = generate_synthetic(&spec, 12).unwrap();
    assert_ne!(a.gt_scene, c.gt_scene);
}

#[test]
fn benchmark_spec_has_eight_labels_over_four_concepts() {
    let data = generate_synthetic(&SceneSpec::default(), 0).unwrap();
    let mut labels = BTreeMap::new();
    for v in &data.supervision.views {
        for (&l, &c) in &v.mask_concept {
            assert_eq!(*labels.entry(l).or_insert(c), c, "label {l} changes concept");
        }
    }
    assert_eq!(labels.keys().copied().collect::<Vec<_>>(), (1..=8).collect::<Vec<u32>>());
    let concepts: BTreeSet<usize> = labels.values().copied().collect();
    assert_eq!(concepts, BTreeSet::from([0, 1, 2, 3]));
    assert_eq!(data.gt_scene.len(), 2500);
}

#[test]
fn infeasible_spec_is_a_configuration_error() {
    let spec = SceneSpec {
        total_splats: 100,
        ..SceneSpec::default()
    };
    assert!(matches!(generate_synthetic(&spec, 0), Err(Error::Config(_))));
}

#[test]
fn single_scale_full_mask_is_constant() {
    let t = table(2, 8, 2);
    let mask = vec![7u32; 5 * 4];
    let maps = build_language_targets(&mask, 5, 4, &BTreeMap::from([(7, 1)]), &t, 1, 8);
    assert_eq!(maps.len(), 1);
    for p in 0..20 {
        assert_eq!(maps[0].pixel(p), t.embeddings[1].as_slice());
    }
}

#[test]
fn pixels_beyond_every_window_are_zero() {
    let t = table(1, 4, 3);
    let (w, h) = (60, 3);
    let mut mask = vec![0u32; w * h];
    mask[0] = 1;
    let maps = build_language_targets(&mask, w, h, &BTreeMap::from([(1, 0)]), &t, 3, 4);
    // level 2 radius is 10, so column 59 is far from column 0
    for m in &maps {
        assert!(m.at(1, 59).iter().all(|&v| v == 0.0));
    }
    assert!(norm(maps[2].at(0, 10)) > 0.99);
    assert!(maps[2].at(0, 11).iter().all(|&v| v == 0.0));
}

#[test]
fn border_pixel_matches_direct_box_filter() {
    let t = table(2, 6, 4);
    let (w, h) = (12, 10);
    let mask: Vec<u32> = (0..w * h).map(|p| if p % w < 6 { 1 } else { 2 }).collect();
    let mc = BTreeMap::from([(1, 0), (2, 1)]);
    let maps = build_language_targets(&mask, w, h, &mc, &t, 2, 4);
    let rad = box_radius(1, 4) as isize;
    for (r, c) in [(5usize, 2usize), (5, 9), (0, 0), (9, 11)] {
        let mut acc = vec![0.0; 6];
        for dr in -rad..=rad {
            for dc in -rad..=rad {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                let e = &t.embeddings[mc[&mask[rr as usize * w + cc as usize]]];
                acc.iter_mut().zip(e).for_each(|(a, v)| *a += v);
            }
        }
        let n = norm(&acc);
        for (got, want) in maps[1].at(r, c).iter().zip(&acc) {
            assert!((got - want / n).abs() < 1e-9);
        }
    }
    // at the border the radius-6 window spans all 12 columns, 6 from each mask
    let mid: Vec<f64> = t.embeddings[0].iter().zip(&t.embeddings[1]).map(|(a, b)| a + b).collect();
    let n = norm(&mid);
    for c in [5, 6] {
        assert!(maps[1].at(5, c).iter().zip(&mid).all(|(g, m)| (g - m / n).abs() < 1e-9));
    }
}

#[test]
fn box_radius_schedule() {
    assert_eq!(box_radius(0, 8), 4);
    assert_eq!(box_radius(1, 8), 12);
    assert_eq!(box_radius(2, 8), 20);
}

#[test]
fn reg_targets_are_piecewise_constant_with_small_noise() {
    let (w, h, d, sigma) = (20, 20, 16, 0.05);
    let mask: Vec<u32> = (0..w * h).map(|p| if p % w < 10 { 0 } else { 1 + (p / w >= 10) as u32 }).collect();
    let maps = build_reg_targets(&[mask.as_slice()], w, h, d, sigma, 9);
    let m = &maps[0];
    let bound = 4.0 * sigma * (d as f64).sqrt();
    let inside: Vec<usize> = (0..w * h).filter(|&p| mask[p] == 1).collect();
    let mut violations = 0;
    for &a in &inside {
        for &b in &inside {
            let diff: Vec<f64> = m.pixel(a).iter().zip(m.pixel(b)).map(|(x, y)| x - y).collect();
            violations += (norm(&diff) > bound) as usize;
        }
    }
    assert_eq!(violations, 0);
    for p in 0..w * h {
        if mask[p] == 0 {
            assert!(m.pixel(p).iter().all(|&v| v == 0.0));
        }
    }
    // two instances are far apart relative to the noise
    let a = inside[0];
    let b = (0..w * h).find(|&p| mask[p] == 2).unwrap();
    let diff: Vec<f64> = m.pixel(a).iter().zip(m.pixel(b)).map(|(x, y)| x - y).collect();
    assert!(norm(&diff) > bound);
    assert_eq!(maps, build_reg_targets(&[mask.as_slice()], w, h, d, sigma, 9));
}

#[test]
fn merge_prefers_larger_masks() {
    let a = vec![true, true, false, false];
    let b = vec![false, true, true, true];
    let c = vec![false, false, false, true];
    assert_eq!(merge_binary_masks(2, 2, &[a, b, c]), vec![1, 2, 2, 2]);
    let x = vec![true, true, false, false];
    let y = vec![false, true, true, false];
    assert_eq!(merge_binary_masks(2, 2, &[x, y]), vec![1, 1, 2, 0]);
}

fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize, d: usize) -> FeatureMap {
    let mut m = FeatureMap::zeros(w, h, d);
    m.data.iter_mut().for_each(|v| *v = rng.random_range(-2.0f32..2.0) as f64);
    m
}

#[test]
fn feature_map_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.fmap");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let maps: Vec<Vec<FeatureMap>> = (0..3).map(|_| (0..2).map(|_| random_map(&mut rng, 5, 4, 7)).collect()).collect();
    write_feature_maps(&path, &maps).unwrap();
    let back = read_feature_maps(&path, Some(7)).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in back.iter().zip(&maps) {
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.data, y.data);
            assert_eq!((x.width, x.height, x.dim), (5, 4, 7));
        }
    }
}

#[test]
fn feature_map_dimension_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.fmap");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    write_feature_maps(&path, &[vec![random_map(&mut rng, 2, 2, 512)]]).unwrap();
    assert!(matches!(read_feature_maps(&path, Some(32)), Err(Error::Dimension(_))));
}

#[test]
fn truncated_feature_map_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.fmap");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    write_feature_maps(&path, &[vec![random_map(&mut rng, 3, 3, 2)]]).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 30 + 4 * 18);
    std::fs::write(&path, &bytes[..30 + 4 * 10 + 2]).unwrap();
    match read_feature_maps(&path, None) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 70),
        other => panic!("expected format error, got {other:?}"),
    }
    std::fs::write(&path, &bytes[..20]).unwrap();
    assert!(matches!(read_feature_maps(&path, None), Err(Error::Format { offset: 20, .. })));
    let mut bad = bytes.clone();
    bad[3] = b'?';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(read_feature_maps(&path, None), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn supervision_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&SceneSpec::named("tiny").unwrap(), 8).unwrap();
    save_supervision(dir.path(), &data.supervision, &data.concepts).unwrap();
    let (set, concepts) = load_supervision(dir.path(), Some(32), Some(16)).unwrap();
    assert_eq!(concepts.names, data.concepts.names);
    assert_eq!(set.views.len(), data.supervision.views.len());
    for (a, b) in set.views.iter().zip(&data.supervision.views) {
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.mask_concept, b.mask_concept);
        assert_eq!(a.rgb.data, b.rgb.data);
        assert_eq!(a.reg.data, b.reg.data);
        assert_eq!(a.language, b.language);
    }
    assert!(matches!(load_supervision(dir.path(), Some(64), None), Err(Error::Dimension(_))));
}

#[test]
fn generated_targets_are_unit_or_zero() {
    let data = generate_synthetic(&SceneSpec::named("small").unwrap(), 2).unwrap();
    for v in &data.supervision.views {
        for m in &v.language {
            for p in 0..m.pixel_count() {
                let n = norm(m.pixel(p));
                assert!(n == 0.0 || (n - 1.0).abs() < 1e-6, "norm {n}");
            }
        }
        for (p, &l) in v.mask.iter().enumerate() {
            assert_eq!(l == 0, v.language[0].pixel(p).iter().all(|&x| x == 0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn merged_masks_partition_the_foreground(bits in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 12), 1..5)) {
        let merged = merge_binary_masks(4, 3, &bits);
        for p in 0..12 {
            let covered = bits.iter().any(|m| m[p]);
            prop_assert_eq!(merged[p] != 0, covered);
            if merged[p] != 0 {
                prop_assert!(bits[merged[p] as usize - 1][p]);
            }
        }
    }

    #[test]
    fn language_targets_are_unit_or_zero(labels in proptest::collection::vec(0u32..4, 48), levels in 1usize..4) {
        let t = table(3, 5, 10);
        let mc = BTreeMap::from([(1, 0), (2, 1), (3, 2)]);
        for m in build_language_targets(&labels, 8, 6, &mc, &t, levels, 2) {
            for p in 0..48 {
                let n = norm(m.pixel(p));
                prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn relabeling_within_a_concept_leaves_targets_unchanged(labels in proptest::collection::vec(0u32..4, 48)) {
        let t = table(2, 5, 11);
        let mc = BTreeMap::from([(1, 0), (2, 0), (3, 1)]);
        // swap the two instances of concept 0
        let swapped: Vec<u32> = labels.iter().map(|&l| match l { 1 => 2, 2 => 1, x => x }).collect();
        let a = build_language_targets(&labels, 8, 6, &mc, &t, 3, 2);
        let b = build_language_targets(&swapped, 8, 6, &mc, &t, 3, 2);
        prop_assert_eq!(a, b);
    }
}
