//! 2D supervision: instance masks with concept labels, multi-scale language
//! target maps and dense regularisation maps, plus their file formats.

pub mod io;
mod synthetic;
mod targets;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use synthetic::{generate_synthetic, SceneSpec, SyntheticData};
pub use targets::{box_radius, build_language_targets, build_reg_targets, merge_binary_masks};

use crate::error::{Error, Result};
use crate::raster::FeatureMap;
use crate::scene::Camera;

const CONCEPT_NAMES: [&str; 12] = [
    "chair", "lamp", "mug", "plant", "book", "vase", "clock", "shoe", "bottle", "bowl", "teddy", "kettle",
];

/// Concept id → unit embedding and display name.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptTable {
    pub names: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
}

impl ConceptTable {
    /// Random unit vectors, redrawn until every pairwise cosine is ≤ `max_cosine`.
    pub fn random<R: Rng>(count: usize, dim: usize, max_cosine: f64, rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("concept embedding dimension must be positive".into()));
        }
        let mut embeddings: Vec<Vec<f64>> = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while embeddings.len() < count {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::Config(format!(
                    "cannot draw {count} concepts in {dim} dimensions with cosine ≤ {max_cosine}"
                )));
            }
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                continue;
            }
            let v: Vec<f64> = v.iter().map(|x| x / n).collect();
            if embeddings.iter().all(|e| dot(e, &v) <= max_cosine) {
                embeddings.push(v);
            }
        }
        let names = (0..count)
            .map(|i| {
                let base = CONCEPT_NAMES[i % CONCEPT_NAMES.len()];
                if i < CONCEPT_NAMES.len() {
                    base.to_string()
                } else {
                    format!("{base}{}", i / CONCEPT_NAMES.len())
                }
            })
            .collect();
        Ok(Self { names, embeddings })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, Vec::len)
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Everything supervising one camera view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSupervision {
    /// Row-major instance labels, 0 = background.
    pub mask: Vec<u32>,
    /// Mask label → concept id, for every nonzero label present.
    pub mask_concept: BTreeMap<u32, usize>,
    pub rgb: FeatureMap,
    /// One map per scale level, `d_clip` channels each.
    pub language: Vec<FeatureMap>,
    pub reg: FeatureMap,
}

impl ViewSupervision {
    /// Pixel indices of each nonzero mask label, ascending by label.
    pub fn mask_pixels(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (p, &l) in self.mask.iter().enumerate() {
            if l != 0 {
                out.entry(l).or_default().push(p);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionSet {
    pub width: usize,
    pub height: usize,
    pub cameras: Vec<Camera>,
    pub views: Vec<ViewSupervision>,
}

impl SupervisionSet {
    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Config("supervision has zero views".into()));
        }
        if self.views.len() != self.cameras.len() {
            return Err(Error::Shape(format!(
                "{} views but {} cameras",
                self.views.len(),
                self.cameras.len()
            )));
        }
        let n = self.width * self.height;
        for (v, (view, cam)) in self.views.iter().zip(&self.cameras).enumerate() {
            if cam.width != self.width || cam.height != self.height {
                return Err(Error::Shape(format!("camera {v} resolution differs from the supervision")));
            }
            if view.mask.len() != n || view.rgb.pixel_count() != n || view.reg.pixel_count() != n {
                return Err(Error::Shape(format!("view {v} maps do not match {}×{}", self.width, self.height)));
            }
            if view.language.iter().any(|m| m.pixel_count() != n) {
                return Err(Error::Shape(format!("view {v} language map resolution mismatch")));
            }
            for &l in &view.mask {
                if l != 0 && !view.mask_concept.contains_key(&l) {
                    return Err(Error::Config(format!("view {v}: mask label {l} has no concept")));
                }
            }
        }
        Ok(())
    }

    pub fn scale_levels(&self) -> usize {
        self.views.first().map_or(0, |v| v.language.len())
    }
}

#[cfg(test)]
mod tests;
