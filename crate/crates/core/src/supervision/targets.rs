use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ConceptTable;
use crate::raster::FeatureMap;

/// Half-width of the level-`s` box window `(2s + 1)·w₀`.
pub fn box_radius(level: usize, base_window: usize) -> usize {
    (2 * level + 1) * base_window / 2
}

/// Level 0 carries each masked pixel's concept embedding; level `s ≥ 1` is
/// level 0 box-filtered with radius [`box_radius`] and renormalised.
pub fn build_language_targets(
    mask: &[u32],
    width: usize,
    height: usize,
    mask_concept: &BTreeMap<u32, usize>,
    concepts: &ConceptTable,
    levels: usize,
    base_window: usize,
) -> Vec<FeatureMap> {
    let dim = concepts.dim();
    let mut base = FeatureMap::zeros(width, height, dim);
    for (p, &l) in mask.iter().enumerate() {
        if l == 0 {
            continue;
        }
        if let Some(&c) = mask_concept.get(&l) {
            base.pixel_mut(p).copy_from_slice(&concepts.embeddings[c]);
        }
    }
    let mut out = Vec::with_capacity(levels);
    if levels == 0 {
        return out;
    }
    // integral image with a zero border row and column
    let (iw, ih) = (width + 1, height + 1);
    let mut integral = vec![0.0; iw * ih * dim];
    for r in 0..height {
        for c in 0..width {
            let src = base.at(r, c);
            for k in 0..dim {
                let up = integral[(r * iw + c + 1) * dim + k];
                let left = integral[((r + 1) * iw + c) * dim + k];
                let diag = integral[(r * iw + c) * dim + k];
                integral[((r + 1) * iw + c + 1) * dim + k] = src[k] + up + left - diag;
            }
        }
    }
    out.push(base);
    for s in 1..levels {
        let rad = box_radius(s, base_window);
        let mut map = FeatureMap::zeros(width, height, dim);
        let mut acc = vec![0.0; dim];
        for r in 0..height {
            let (r0, r1) = (r.saturating_sub(rad), (r + rad + 1).min(height));
            for c in 0..width {
                let (c0, c1) = (c.saturating_sub(rad), (c + rad + 1).min(width));
                for k in 0..dim {
                    acc[k] = integral[(r1 * iw + c1) * dim + k] - integral[(r0 * iw + c1) * dim + k]
                        - integral[(r1 * iw + c0) * dim + k]
                        + integral[(r0 * iw + c0) * dim + k];
                }
                let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
                // cancellation leaves tiny residues where no mask is in the window
                if n > 1e-9 {
                    for (d, v) in map.pixel_mut(r * width + c).iter_mut().zip(&acc) {
                        *d = v / n;
                    }
                }
            }
        }
        out.push(map);
    }
    out
}

/// One `d_reg` vector per instance label (shared by all views) plus per-pixel
/// noise of standard deviation `noise`; zero on background.
pub fn build_reg_targets(
    masks: &[&[u32]],
    width: usize,
    height: usize,
    d_reg: usize,
    noise: f64,
    seed: u64,
) -> Vec<FeatureMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_label = masks.iter().flat_map(|m| m.iter()).copied().max().unwrap_or(0) as usize;
    let proto = Normal::new(0.0, (1.0 / d_reg.max(1) as f64).sqrt()).expect("finite std");
    let instance: Vec<Vec<f64>> = (0..=max_label)
        .map(|_| (0..d_reg).map(|_| proto.sample(&mut rng)).collect())
        .collect();
    let jitter = Normal::new(0.0, noise).expect("finite noise");
    masks
        .iter()
        .map(|mask| {
            let mut map = FeatureMap::zeros(width, height, d_reg);
            for (p, &l) in mask.iter().enumerate() {
                let px = map.pixel_mut(p);
                // noise is drawn for every pixel so the stream does not depend on the labels
                for (k, v) in px.iter_mut().enumerate() {
                    let e: f64 = jitter.sample(&mut rng);
                    if l != 0 {
                        *v = instance[l as usize][k] + e;
                    }
                }
            }
            map
        })
        .collect()
}

/// Rasterises possibly overlapping binary masks into one label image
/// (labels `1..=masks.len()` in input order); on overlap the larger mask wins,
/// ties go to the earlier mask.
pub fn merge_binary_masks(width: usize, height: usize, masks: &[Vec<bool>]) -> Vec<u32> {
    let areas: Vec<usize> = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).collect();
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by(|&a, &b| areas[b].cmp(&areas[a]).then(a.cmp(&b)));
    let mut out = vec![0u32; width * height];
    // paint smallest first so larger masks overwrite
    for &m in order.iter().rev() {
        for (p, &b) in masks[m].iter().enumerate() {
            if b {
                out[p] = m as u32 + 1;
            }
        }
    }
    out
}
