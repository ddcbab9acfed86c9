use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{
    adjusted_rand_index, concept_mask, instance_seg_metrics, select_by_threshold, select_decoded, selection_metrics,
    MaskPair, MetricReport,
};
use crate::cluster::{decode, DecodeConfig, DecodeInputs};
use crate::error::{Error, Result};
use crate::fields::HashFieldStack;
use crate::scene::GaussianScene;
use crate::supervision::{ConceptTable, SupervisionSet};
use crate::trainer::{ablation_variant, build_fields, train, TrainConfig, TrainOutput};

/// Decode variants on one checkpoint: per-Gaussian thresholding, Stage 1
/// only, and the full two-stage decode.
pub const DECODE_VARIANTS: [&str; 3] = ["per_gaussian", "stage1", "full"];
/// Training variants, each retrained from scratch and decoded in full.
pub const TRAIN_VARIANTS: [&str; 2] = ["no_mhe", "no_joint"];

#[derive(Clone, Debug)]
pub struct CheckpointEval {
    /// Decode variant → selection report over (concept, view) pairs.
    pub selection: BTreeMap<String, MetricReport>,
    /// Class-agnostic instance metrics of the unqueried full decode.
    pub instances: MetricReport,
    pub ari: f64,
    /// Concept name → number of instances the full decode selects.
    pub query_instances: BTreeMap<String, usize>,
}

/// Selection is scored on the views where the concept is visible.
pub fn evaluate_checkpoint(
    scene: &GaussianScene,
    stack: &HashFieldStack,
    supervision: &SupervisionSet,
    concepts: &ConceptTable,
    config: &DecodeConfig,
    variants: &[&str],
) -> Result<CheckpointEval> {
    let inputs = DecodeInputs::from_fields(scene, stack);
    let mut selection = BTreeMap::new();
    let mut query_instances = BTreeMap::new();
    let truth: Vec<Vec<Vec<bool>>> = (0..concepts.len())
        .map(|c| supervision.views.iter().map(|v| concept_mask(v, c)).collect())
        .collect();
    for &variant in variants {
        let mut predicted: Vec<Vec<Vec<bool>>> = Vec::with_capacity(concepts.len());
        for (c, q) in concepts.embeddings.iter().enumerate() {
            let masks = match variant {
                "per_gaussian" => {
                    select_by_threshold(scene, &inputs, q, config.relevance_threshold, &supervision.cameras)?
                }
                "stage1" | "full" => {
                    let r = select_decoded(scene, &inputs, q, config, &supervision.cameras, variant == "full")?;
                    if variant == "full" {
                        query_instances.insert(concepts.names[c].clone(), r.instances.len());
                    }
                    r.masks
                }
                other => return Err(Error::Config(format!("unknown decode variant {other:?}"))),
            };
            predicted.push(masks);
        }
        let mut pairs = Vec::new();
        for (c, name) in concepts.names.iter().enumerate() {
            for (v, gt) in truth[c].iter().enumerate() {
                if gt.iter().any(|&g| g) {
                    pairs.push(MaskPair {
                        query: name,
                        view: v,
                        predicted: &predicted[c][v],
                        truth: gt,
                    });
                }
            }
        }
        selection.insert(variant.to_string(), selection_metrics(&pairs)?);
    }

    let gt = scene
        .gt_instance_label
        .as_ref()
        .ok_or_else(|| Error::Config("instance evaluation needs ground-truth labels".into()))?;
    let decoded = decode(&inputs, config, None, true)?;
    let instances = instance_seg_metrics(&decoded.labels, gt)?;
    let objects: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] > 0).collect();
    let ari = adjusted_rand_index(
        &objects.iter().map(|&i| decoded.labels[i]).collect::<Vec<_>>(),
        &objects.iter().map(|&i| gt[i]).collect::<Vec<_>>(),
    );
    Ok(CheckpointEval {
        selection,
        instances,
        ari,
        query_instances,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub miou: f64,
    pub macc: f64,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub full: CheckpointEval,
    pub retrained: BTreeMap<String, CheckpointEval>,
    pub trained: TrainOutput,
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Selection report of every row, keyed by variant.
    pub fn reports(&self) -> Vec<(&str, &MetricReport)> {
        let mut out: Vec<(&str, &MetricReport)> =
            self.full.selection.iter().map(|(k, v)| (k.as_str(), v)).collect();
        out.sort_by_key(|(k, _)| DECODE_VARIANTS.iter().position(|d| d == k));
        for (k, e) in &self.retrained {
            out.push((k.as_str(), &e.selection["full"]));
        }
        out
    }
}

fn train_variant(init: &GaussianScene, supervision: &SupervisionSet, config: &TrainConfig, variant: &str) -> Result<TrainOutput> {
    let c = ablation_variant(config, variant)?;
    let fields = build_fields(&c, init)?;
    train(init.clone(), fields, supervision, &c)
}

/// Trains the full model and both training ablations from `init`, evaluating
/// every decode variant on the full checkpoint.
pub fn run_ablation(
    init: &GaussianScene,
    supervision: &SupervisionSet,
    concepts: &ConceptTable,
    train_config: &TrainConfig,
    decode_config: &DecodeConfig,
) -> Result<AblationReport> {
    let trained = train_variant(init, supervision, train_config, "full")?;
    let full = evaluate_checkpoint(&trained.scene, &trained.fields, supervision, concepts, decode_config, &DECODE_VARIANTS)?;
    let mut retrained = BTreeMap::new();
    for v in TRAIN_VARIANTS {
        let out = train_variant(init, supervision, train_config, v)?;
        let eval = evaluate_checkpoint(&out.scene, &out.fields, supervision, concepts, decode_config, &["full"])?;
        retrained.insert(v.to_string(), eval);
    }
    let mut rows: Vec<AblationRow> = DECODE_VARIANTS
        .iter()
        .map(|v| {
            let r = &full.selection[*v];
            AblationRow {
                variant: v.to_string(),
                miou: r.miou,
                macc: r.macc,
            }
        })
        .collect();
    for v in TRAIN_VARIANTS {
        let r = &retrained[v].selection["full"];
        rows.push(AblationRow {
            variant: v.to_string(),
            miou: r.miou,
            macc: r.macc,
        });
    }
    Ok(AblationReport {
        rows,
        full,
        retrained,
        trained,
    })
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max("variant".len());
    let mut s = format!("{:<width$}  {:>8}  {:>9}\n", "variant", "mIoU", "mAcc@0.25");
    for r in rows {
        let _ = writeln!(s, "{:<width$}  {:>8.4}  {:>9.4}", r.variant, r.miou, r.macc);
    }
    s
}
