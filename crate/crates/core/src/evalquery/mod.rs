//! Query-driven object selection, selection and instance metrics, and the
//! ablation harness.

mod ablation;
mod metrics;

use std::collections::BTreeMap;

pub use ablation::{
    ablation_table, evaluate_checkpoint, run_ablation, AblationReport, AblationRow, CheckpointEval, DECODE_VARIANTS,
    TRAIN_VARIANTS,
};
pub use metrics::{
    adjusted_rand_index, instance_seg_metrics, iou, iou_sets, metrics_csv, selection_metrics, IouRecord, MaskPair,
    MetricReport, ACC_IOU,
};

use crate::cluster::{decode, DecodeConfig, DecodeInputs};
use crate::error::Result;
use crate::fields::HashFieldStack;
use crate::raster::{Attributes, Frame, RenderOptions};
use crate::scene::{Camera, GaussianScene};
use crate::supervision::ViewSupervision;

/// A pixel is selected when the rendered indicator, normalised by coverage,
/// exceeds this ratio …
pub const SELECT_RATIO: f64 = 0.5;
/// … and the accumulated alpha exceeds this.
pub const SELECT_COVERAGE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    /// Selected instances with their relevance, most relevant first.
    pub instances: Vec<(Vec<usize>, f64)>,
    /// One row-major mask per requested camera.
    pub masks: Vec<Vec<bool>>,
}

/// Renders the 0/1 indicator of `selected` and binarises it.
pub fn render_selection(
    scene: &GaussianScene,
    selected: &[bool],
    cameras: &[Camera],
    render: RenderOptions,
) -> Result<Vec<Vec<bool>>> {
    let values: Vec<f64> = selected.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
    cameras
        .iter()
        .map(|cam| {
            let map = Frame::new(scene, cam, render).render(Attributes::Features { dim: 1, values: &values })?;
            Ok(map
                .data
                .iter()
                .zip(&map.accumulated_alpha)
                .map(|(&v, &a)| a > SELECT_COVERAGE && v / a > SELECT_RATIO)
                .collect())
        })
        .collect()
}

/// Decodes against `query` (full or Stage 1 only) and renders the union of
/// the selected instances.
pub fn select_decoded(
    scene: &GaussianScene,
    inputs: &DecodeInputs,
    query: &[f64],
    config: &DecodeConfig,
    cameras: &[Camera],
    spatial_refinement: bool,
) -> Result<QueryResult> {
    let decoded = decode(inputs, config, Some(query), spatial_refinement)?;
    let mut selected = vec![false; inputs.len()];
    let mut instances: Vec<(Vec<usize>, f64)> = decoded
        .clusters
        .into_iter()
        .map(|c| {
            for &i in &c.members {
                selected[i] = true;
            }
            (c.members, c.relevance.unwrap_or(f64::NAN))
        })
        .collect();
    // stable, so ties keep the decode order
    instances.sort_by(|a, b| b.1.total_cmp(&a.1));
    let masks = render_selection(scene, &selected, cameras, RenderOptions::default())?;
    Ok(QueryResult { instances, masks })
}

pub fn select_objects(
    scene: &GaussianScene,
    stack: &HashFieldStack,
    query: &[f64],
    config: &DecodeConfig,
    cameras: &[Camera],
) -> Result<QueryResult> {
    let inputs = DecodeInputs::from_fields(scene, stack);
    select_decoded(scene, &inputs, query, config, cameras, true)
}

/// Per-Gaussian thresholding of `cos(f, q) > τ` with no clustering.
pub fn select_by_threshold(
    scene: &GaussianScene,
    inputs: &DecodeInputs,
    query: &[f64],
    threshold: f64,
    cameras: &[Camera],
) -> Result<Vec<Vec<bool>>> {
    let selected: Vec<bool> = inputs.cosines(query).iter().map(|&c| c > threshold).collect();
    render_selection(scene, &selected, cameras, RenderOptions::default())
}

/// Ground-truth mask of every object carrying `concept` in one view.
pub fn concept_mask(view: &ViewSupervision, concept: usize) -> Vec<bool> {
    view.mask
        .iter()
        .map(|l| *l != 0 && view.mask_concept.get(l) == Some(&concept))
        .collect()
}

/// Number of distinct ground-truth objects per concept id.
pub fn objects_per_concept(scene: &GaussianScene) -> BTreeMap<usize, usize> {
    let mut seen: BTreeMap<usize, std::collections::BTreeSet<i64>> = BTreeMap::new();
    if let (Some(labels), Some(concepts)) = (&scene.gt_instance_label, &scene.gt_concept_id) {
        for (&l, &c) in labels.iter().zip(concepts) {
            if l > 0 && c >= 0 {
                seen.entry(c as usize).or_default().insert(l);
            }
        }
    }
    seen.into_iter().map(|(c, s)| (c, s.len())).collect()
}

#[cfg(test)]
mod tests;
