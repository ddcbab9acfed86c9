use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;
use crate::cluster::DecodeInputs;
use crate::supervision::{generate_synthetic, SceneSpec, SyntheticData};

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

#[test]
fn iou_set_arithmetic() {
    let side = 8;
    let top: Vec<bool> = (0..side * side).map(|p| p / side < side / 2).collect();
    let left: Vec<bool> = (0..side * side).map(|p| p % side < side / 2).collect();
    assert!(close(iou(&top, &left), 1.0 / 3.0));
    assert_eq!(iou(&top, &top), 1.0);
    let bottom: Vec<bool> = top.iter().map(|v| !v).collect();
    assert_eq!(iou(&top, &bottom), 0.0);
    let empty = vec![false; side * side];
    assert_eq!(iou(&empty, &empty), 1.0);
    assert_eq!(iou(&empty, &top), 0.0);
}

#[test]
fn selection_report_means_and_accuracy() {
    let a = [true, true, false, false];
    let b = [true, false, false, false];
    let c = [false, false, true, true];
    let pairs = [
        MaskPair { query: "x", view: 0, predicted: &a, truth: &a },
        MaskPair { query: "x", view: 1, predicted: &a, truth: &b },
        MaskPair { query: "y", view: 0, predicted: &a, truth: &c },
        MaskPair { query: "y", view: 1, predicted: &b, truth: &a },
    ];
    let r = selection_metrics(&pairs).unwrap();
    assert!(close(r.miou, (1.0 + 0.5 + 0.0 + 0.5) / 4.0));
    assert!(close(r.macc, 0.75));
    assert_eq!(r.per_query["x"], (0.75, 1.0));
    assert_eq!(r.per_query["y"], (0.25, 0.5));
    assert_eq!(
        metrics_csv(&r).lines().take(3).collect::<Vec<_>>(),
        ["query,view,iou", "x,0,1.00000000", "x,1,0.50000000"]
    );
    let short = [true];
    let bad = [MaskPair { query: "x", view: 0, predicted: &short, truth: &a }];
    assert!(selection_metrics(&bad).is_err());
}

#[test]
fn instance_metric_oracles() {
    let gt = [1, 1, 2, 2, 0, 3, 3];
    let same = instance_seg_metrics(&gt, &gt).unwrap();
    assert_eq!((same.miou, same.macc), (1.0, 1.0));
    let none = instance_seg_metrics(&[-1; 7], &gt).unwrap();
    assert_eq!((none.miou, none.macc), (0.0, 0.0));
    // instances 1 and 2 merged in one prediction: first takes 0.5, second gets nothing
    let merged = instance_seg_metrics(&[0, 0, 0, 0, 0, 1, 1], &gt).unwrap();
    let ious: Vec<f64> = merged.records.iter().map(|r| r.iou).collect();
    assert_eq!(ious, vec![0.5, 0.0, 1.0]);
    assert!(instance_seg_metrics(&[0, 1], &gt).is_err());
}

#[test]
fn adjusted_rand_oracles() {
    assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 7, 7]), 1.0);
    assert_eq!(adjusted_rand_index(&[0, 0, 0], &[3, 3, 3]), 1.0);
    assert!(close(adjusted_rand_index(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 2, 2]), 0.24242424242424243));
    assert!(close(
        adjusted_rand_index(&[0, 0, 1, 1, 2, 2, 3], &[0, 0, 0, 1, 1, -1, -1]),
        0.08695652173913043
    ));
}

/// Independent IoU via explicit index sets.
fn set_oracle(p: &[bool], g: &[bool]) -> f64 {
    let ps: BTreeSet<usize> = (0..p.len()).filter(|&i| p[i]).collect();
    let gs: BTreeSet<usize> = (0..g.len()).filter(|&i| g[i]).collect();
    iou_sets(&ps, &gs)
}

/// Greedy matching written against per-instance index lists.
fn instance_oracle(pred: &[i64], gt: &[i64]) -> Vec<f64> {
    let n = gt.len();
    let mut gt_ids: Vec<i64> = gt.iter().copied().filter(|&g| g > 0).collect();
    gt_ids.sort();
    gt_ids.dedup();
    let mut pred_ids: Vec<i64> = (0..n).filter(|&i| gt[i] > 0 && pred[i] >= 0).map(|i| pred[i]).collect();
    pred_ids.sort();
    pred_ids.dedup();
    let mut used = vec![false; pred_ids.len()];
    gt_ids
        .iter()
        .map(|&g| {
            let mut best: Option<(usize, f64)> = None;
            for (k, &p) in pred_ids.iter().enumerate() {
                if used[k] {
                    continue;
                }
                let inter = (0..n).filter(|&i| gt[i] == g && pred[i] == p).count();
                let union = (0..n).filter(|&i| gt[i] > 0 && (gt[i] == g || pred[i] == p)).count();
                let v = inter as f64 / union as f64;
                if inter > 0 && best.is_none_or(|(_, b)| v > b) {
                    best = Some((k, v));
                }
            }
            match best {
                Some((k, v)) => {
                    used[k] = true;
                    v
                }
                None => 0.0,
            }
        })
        .collect()
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_matches_sets(p in prop::collection::vec(any::<bool>(), 1..80), seed in any::<u64>()) {
        let g: Vec<bool> = p.iter().enumerate().map(|(i, &v)| v ^ ((seed >> (i % 64)) & 1 == 1)).collect();
        prop_assert_eq!(iou(&p, &g), iou(&g, &p));
        prop_assert!(close(iou(&p, &g), set_oracle(&p, &g)));
        prop_assert_eq!(iou(&p, &p), 1.0);
    }

    #[test]
    fn iou_grows_with_correct_pixels(g in prop::collection::vec(any::<bool>(), 1..80), k in 0usize..80) {
        let p = vec![false; g.len()];
        let mut better = p.clone();
        if let Some(i) = (0..g.len()).filter(|&i| g[i]).nth(k % g.len().max(1)) {
            better[i] = true;
        }
        prop_assert!(iou(&better, &g) >= iou(&p, &g));
    }

    #[test]
    fn instance_metrics_match_oracle(
        gt in prop::collection::vec(0i64..5, 1..40),
        pred in prop::collection::vec(-1i64..5, 40),
    ) {
        let pred = &pred[..gt.len()];
        let r = instance_seg_metrics(pred, &gt).unwrap();
        let want = instance_oracle(pred, &gt);
        prop_assert_eq!(r.records.len(), want.len());
        for (a, b) in r.records.iter().zip(&want) {
            prop_assert!(close(a.iou, *b));
        }
        prop_assert!((0.0..=1.0).contains(&r.miou) && (0.0..=1.0).contains(&r.macc));
    }
}

fn tiny() -> SyntheticData {
    generate_synthetic(&SceneSpec::named("tiny").unwrap(), 3).unwrap()
}

/// Decoder inputs built from ground truth: instance codes one-hot per object,
/// embeddings equal to the object's concept (floor and floaters get zeros).
fn oracle_inputs(data: &SyntheticData) -> DecodeInputs {
    let scene = &data.gt_scene;
    let labels = scene.gt_instance_label.as_ref().unwrap();
    let concepts = scene.gt_concept_id.as_ref().unwrap();
    let k = data.spec.objects + 1;
    let d = data.concepts.dim();
    let mut instance = vec![0.0; scene.len() * k];
    let mut embedding = vec![0.0; scene.len() * d];
    for i in 0..scene.len() {
        instance[i * k + labels[i] as usize] = 4.0;
        if concepts[i] >= 0 {
            embedding[i * d..(i + 1) * d].copy_from_slice(&data.concepts.embeddings[concepts[i] as usize]);
        }
    }
    DecodeInputs {
        positions: scene.positions(),
        d_inst: k,
        instance,
        d_clip: d,
        embedding,
        scale: vec![1.0; scene.len()],
    }
}

#[test]
fn full_selection_equals_coverage() {
    let data = tiny();
    let scene = &data.gt_scene;
    let cams = &data.supervision.cameras[..2];
    let all = render_selection(scene, &vec![true; scene.len()], cams, RenderOptions::default()).unwrap();
    for (mask, cam) in all.iter().zip(cams) {
        let map = Frame::new(scene, cam, RenderOptions::default()).render(Attributes::Color).unwrap();
        let coverage: Vec<bool> = map.accumulated_alpha.iter().map(|&a| a > SELECT_COVERAGE).collect();
        assert_eq!(mask, &coverage);
    }
    let none = render_selection(scene, &vec![false; scene.len()], cams, RenderOptions::default()).unwrap();
    assert!(none.iter().flatten().all(|&v| !v));
}

#[test]
fn oracle_features_select_each_concept() {
    let data = tiny();
    let inputs = oracle_inputs(&data);
    let config = DecodeConfig::default();
    let cams = &data.supervision.cameras;
    for (c, q) in data.concepts.embeddings.iter().enumerate() {
        let r = select_decoded(&data.gt_scene, &inputs, q, &config, cams, true).unwrap();
        assert_eq!(r.instances.len(), objects_per_concept(&data.gt_scene)[&c]);
        assert!(r.instances.windows(2).all(|w| w[0].1 >= w[1].1));
        for (v, m) in r.masks.iter().enumerate() {
            let gt = concept_mask(&data.supervision.views[v], c);
            if gt.iter().any(|&g| g) {
                assert!(iou(m, &gt) > 0.5, "concept {c} view {v}: {}", iou(m, &gt));
            }
        }
        // masks depend only on the union of the selected instances
        let mut union = vec![false; inputs.len()];
        for (members, _) in r.instances.iter().rev() {
            members.iter().for_each(|&i| union[i] = true);
        }
        assert_eq!(render_selection(&data.gt_scene, &union, cams, RenderOptions::default()).unwrap(), r.masks);
    }
}

#[test]
fn orthogonal_query_gives_empty_masks() {
    let data = tiny();
    let inputs = oracle_inputs(&data);
    let q = vec![0.0; data.concepts.dim()];
    let r = select_decoded(&data.gt_scene, &inputs, &q, &DecodeConfig::default(), &data.supervision.cameras, true).unwrap();
    assert!(r.instances.is_empty());
    assert!(r.masks.iter().flatten().all(|&v| !v));
    let t = select_by_threshold(&data.gt_scene, &inputs, &q, 0.6, &data.supervision.cameras).unwrap();
    assert!(t.iter().flatten().all(|&v| !v));
}

#[test]
fn instance_relabeling_keeps_masks() {
    let data = tiny();
    let mut inputs = oracle_inputs(&data);
    let q = &data.concepts.embeddings[0];
    let cams = &data.supervision.cameras;
    let before = select_decoded(&data.gt_scene, &inputs, q, &DecodeConfig::default(), cams, true).unwrap();
    // reverse the one-hot axes so every instance id changes
    let k = inputs.d_inst;
    for row in inputs.instance.chunks_mut(k) {
        row.reverse();
    }
    let after = select_decoded(&data.gt_scene, &inputs, q, &DecodeConfig::default(), cams, true).unwrap();
    assert_eq!(before.masks, after.masks);
}

#[test]
fn ablation_table_is_aligned() {
    let rows = vec![
        AblationRow { variant: "per_gaussian".into(), miou: 0.1, macc: 0.25 },
        AblationRow { variant: "full".into(), miou: 0.5, macc: 1.0 },
    ];
    let t = ablation_table(&rows);
    let lines: Vec<&str> = t.lines().collect();
    assert_eq!(lines[0], "variant           mIoU  mAcc@0.25");
    assert_eq!(lines[2], "full            0.5000     1.0000");
    assert!(lines.iter().all(|l| l.len() == lines[0].len()));
}
