//! Two-stage instance decoding: HDBSCAN over instance features, optional
//! relevance filtering against a query embedding, then DBSCAN over the 3D
//! positions of each surviving cluster.

mod dbscan;
mod hdbscan;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

pub use dbscan::{dbscan, median_nn_distance};
pub use hdbscan::{core_distances, hdbscan, mutual_reachability_mst, ClusterHierarchy, CondensedEdge, Extraction, MstEdge};

use crate::error::{Error, Result};
use crate::fields::HashFieldStack;
use crate::scene::{sigmoid, GaussianScene};

pub const DECODE_MAGIC: &str = "#splatsense-decode";

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub min_cluster_size: usize,
    pub min_samples: usize,
    /// τ: clusters with relevance ≤ τ are dropped when a query is given.
    pub relevance_threshold: f64,
    /// `None` uses 3× the median nearest-neighbour distance between centers.
    pub dbscan_eps: Option<f64>,
    pub dbscan_min_pts: usize,
    pub extraction: Extraction,
    /// Slope of the logistic scale gate.
    pub relevance_sharpness: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            min_cluster_size: 20,
            min_samples: 10,
            relevance_threshold: 0.6,
            dbscan_eps: None,
            dbscan_min_pts: 4,
            extraction: Extraction::ExcessOfMass,
            relevance_sharpness: 4.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_cluster_size < 2 {
            return Err(Error::Config("min_cluster_size must be at least 2".into()));
        }
        if self.min_samples == 0 || self.dbscan_min_pts == 0 {
            return Err(Error::Config("min_samples and dbscan_min_pts must be positive".into()));
        }
        if !(-1.0 < self.relevance_threshold && self.relevance_threshold < 1.0) {
            return Err(Error::Config(format!(
                "relevance_threshold must lie in (-1, 1), got {}",
                self.relevance_threshold
            )));
        }
        if let Some(e) = self.dbscan_eps {
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::Config(format!("dbscan_eps must be positive, got {e}")));
            }
        }
        Ok(())
    }
}

/// Per-Gaussian quantities the decoder reads, all row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeInputs {
    pub positions: Vec<Vector3<f64>>,
    pub d_inst: usize,
    pub instance: Vec<f64>,
    pub d_clip: usize,
    pub embedding: Vec<f64>,
    pub scale: Vec<f64>,
}

impl DecodeInputs {
    pub fn from_fields(scene: &GaussianScene, stack: &HashFieldStack) -> Self {
        let positions: Vec<Vector3<f64>> = scene.primitives.iter().map(|p| p.position).collect();
        let feats = stack.evaluate_all(&positions);
        Self {
            d_inst: stack.config.d_inst,
            instance: feats.iter().flat_map(|f| f.instance.iter().copied()).collect(),
            d_clip: stack.config.d_clip,
            embedding: feats.iter().flat_map(|f| f.embedding.iter().copied()).collect(),
            scale: feats.iter().map(|f| f.scale).collect(),
            positions,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn embedding_of(&self, i: usize) -> &[f64] {
        &self.embedding[i * self.d_clip..(i + 1) * self.d_clip]
    }

    /// Cosine similarity of every embedding with `query`.
    pub fn cosines(&self, query: &[f64]) -> Vec<f64> {
        let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
        (0..self.len())
            .map(|i| {
                let e = self.embedding_of(i);
                let en = e.iter().map(|v| v * v).sum::<f64>().sqrt();
                let d: f64 = e.iter().zip(query).map(|(a, b)| a * b).sum();
                if en > 0.0 && qn > 0.0 { d / (en * qn) } else { 0.0 }
            })
            .collect()
    }

    fn flat_positions(&self, members: &[usize]) -> Vec<f64> {
        members.iter().flat_map(|&i| self.positions[i].iter().copied()).collect()
    }
}

/// Mean over members of `cos(f_i, q) · 2σ(−k·|scale_i − median scale|)`.
pub fn cluster_relevance(inputs: &DecodeInputs, members: &[usize], query: &[f64], sharpness: f64) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::Config("relevance of an empty cluster is undefined".into()));
    }
    let mut scales: Vec<f64> = members.iter().map(|&i| inputs.scale[i]).collect();
    scales.sort_by(f64::total_cmp);
    let m = scales.len();
    let median = if m % 2 == 1 { scales[m / 2] } else { 0.5 * (scales[m / 2 - 1] + scales[m / 2]) };
    let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut total = 0.0;
    for &i in members {
        let e = inputs.embedding_of(i);
        let en = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos = if en > 0.0 && qn > 0.0 {
            e.iter().zip(query).map(|(a, b)| a * b).sum::<f64>() / (en * qn)
        } else {
            0.0
        };
        let gate = 2.0 * sigmoid(-sharpness * (inputs.scale[i] - median).abs());
        total += cos * gate;
    }
    Ok(total / members.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedCluster {
    /// Ascending Gaussian indices.
    pub members: Vec<usize>,
    pub stage1: usize,
    /// Present when decoding against a query.
    pub relevance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceDecodeResult {
    /// Final instance per Gaussian; −1 for noise or unselected.
    pub labels: Vec<i64>,
    pub clusters: Vec<DecodedCluster>,
    /// Stage-1 cluster id → final instance ids.
    pub provenance: BTreeMap<usize, Vec<usize>>,
    /// Stage-1 cluster per Gaussian, before relevance filtering.
    pub stage1_labels: Vec<i64>,
}

/// Groups labelled points, returning groups ordered by smallest member.
fn groups_by_label(labels: &[i64]) -> Vec<Vec<usize>> {
    let mut by: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 {
            by.entry(l).or_default().push(i);
        }
    }
    let mut groups: Vec<Vec<usize>> = by.into_values().collect();
    groups.sort_by_key(|g| g[0]);
    groups
}

/// Full decode when `spatial_refinement` is set, Stage 1 (plus the query
/// filter) otherwise.
pub fn decode(
    inputs: &DecodeInputs,
    config: &DecodeConfig,
    query: Option<&[f64]>,
    spatial_refinement: bool,
) -> Result<InstanceDecodeResult> {
    config.validate()?;
    let n = inputs.len();
    if let Some(q) = query {
        if q.len() != inputs.d_clip {
            return Err(Error::Dimension(format!(
                "query has {} dimensions, embeddings have {}",
                q.len(),
                inputs.d_clip
            )));
        }
    }
    let (raw, _) = hdbscan(
        &inputs.instance,
        inputs.d_inst,
        config.min_cluster_size,
        config.min_samples,
        config.extraction,
    );
    let stage1 = groups_by_label(&raw);
    let mut stage1_labels = vec![-1i64; n];
    for (c, g) in stage1.iter().enumerate() {
        for &i in g {
            stage1_labels[i] = c as i64;
        }
    }
    let eps = match config.dbscan_eps {
        Some(e) => e,
        None => {
            let all: Vec<f64> = inputs.positions.iter().flat_map(|p| p.iter().copied()).collect();
            3.0 * median_nn_distance(&all, 3).unwrap_or(1.0)
        }
    };

    let mut candidates: Vec<DecodedCluster> = Vec::new();
    for (c, members) in stage1.iter().enumerate() {
        let relevance = match query {
            Some(q) => {
                let r = cluster_relevance(inputs, members, q, config.relevance_sharpness)?;
                if r <= config.relevance_threshold {
                    continue;
                }
                Some(r)
            }
            None => None,
        };
        if !spatial_refinement {
            candidates.push(DecodedCluster {
                members: members.clone(),
                stage1: c,
                relevance,
            });
            continue;
        }
        let sub = dbscan(&inputs.flat_positions(members), 3, eps, config.dbscan_min_pts);
        for g in groups_by_label(&sub) {
            candidates.push(DecodedCluster {
                members: g.iter().map(|&k| members[k]).collect(),
                stage1: c,
                relevance,
            });
        }
    }
    candidates.sort_by_key(|c| c.members[0]);
    let mut labels = vec![-1i64; n];
    let mut provenance: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (id, c) in candidates.iter().enumerate() {
        for &i in &c.members {
            labels[i] = id as i64;
        }
        provenance.entry(c.stage1).or_default().push(id);
    }
    Ok(InstanceDecodeResult {
        labels,
        clusters: candidates,
        provenance,
        stage1_labels,
    })
}

pub fn decode_instances(
    scene: &GaussianScene,
    stack: &HashFieldStack,
    config: &DecodeConfig,
    query: Option<&[f64]>,
) -> Result<InstanceDecodeResult> {
    decode(&DecodeInputs::from_fields(scene, stack), config, query, true)
}

pub fn write_decode(path: &Path, result: &InstanceDecodeResult) -> Result<()> {
    let mut s = format!(
        "{DECODE_MAGIC} v1 count={} clusters={}\n",
        result.labels.len(),
        result.clusters.len()
    );
    for (i, l) in result.labels.iter().enumerate() {
        let _ = writeln!(s, "{i} {l}");
    }
    s.push_str("#clusters cluster_id size relevance stage1_id\n");
    for (id, c) in result.clusters.iter().enumerate() {
        let rel = c.relevance.map_or_else(|| "nan".to_string(), |r| format!("{r:.6}"));
        let _ = writeln!(s, "{id} {} {rel} {}", c.members.len(), c.stage1);
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads the per-Gaussian labels of a decode export.
pub fn read_decode_labels(path: &Path) -> Result<Vec<i64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if !header.starts_with(DECODE_MAGIC) {
        return Err(Error::parse(path, 0, "missing decode header"));
    }
    let count: usize = header
        .split_whitespace()
        .find_map(|t| t.strip_prefix("count="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::parse(path, 0, "header lacks count="))?;
    let mut labels = Vec::with_capacity(count);
    for (r, line) in lines.take_while(|l| !l.starts_with('#')).enumerate() {
        let mut it = line.split_whitespace();
        let idx: Option<usize> = it.next().and_then(|t| t.parse().ok());
        let label: Option<i64> = it.next().and_then(|t| t.parse().ok());
        match (idx, label) {
            (Some(i), Some(l)) if i == r => labels.push(l),
            _ => return Err(Error::parse(path, r, "expected `index label`")),
        }
    }
    if labels.len() != count {
        return Err(Error::parse(path, labels.len(), format!("expected {count} labels")));
    }
    Ok(labels)
}
