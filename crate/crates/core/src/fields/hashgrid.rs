//! Multi-resolution grid encoding with spatially hashed (or dense) tables.

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{Error, Result};

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Clone, Debug, PartialEq)]
pub struct HashGridConfig {
    pub levels: usize,
    pub base_resolution: usize,
    pub growth: f64,
    pub table_size: usize,
    pub feats_per_level: usize,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            base_resolution: 16,
            growth: 1.45,
            table_size: 1 << 16,
            feats_per_level: 4,
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_resolution == 0 || self.table_size == 0 || self.feats_per_level == 0 {
            return Err(Error::Config("hash grid sizes must be positive".into()));
        }
        if !(self.growth >= 1.0) {
            return Err(Error::Config(format!("hash grid growth must be ≥ 1, got {}", self.growth)));
        }
        if self.table_size > u32::MAX as usize {
            return Err(Error::Config("hash table size must fit in 32 bits".into()));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.feats_per_level
    }

    pub fn resolution(&self, level: usize) -> usize {
        (self.base_resolution as f64 * self.growth.powi(level as i32)).floor() as usize
    }
}

/// Table slot of lattice vertex `v` at a level with resolution `res`.
pub fn vertex_index(v: [u32; 3], res: usize, table_size: usize) -> usize {
    let side = res as u64 + 1;
    if side * side * side <= table_size as u64 {
        (v[0] as u64 + v[1] as u64 * side + v[2] as u64 * side * side) as usize
    } else {
        let h = v[0].wrapping_mul(PRIMES[0]) ^ v[1].wrapping_mul(PRIMES[1]) ^ v[2].wrapping_mul(PRIMES[2]);
        h as usize % table_size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HashGrid {
    pub config: HashGridConfig,
    pub bbox_min: Vector3<f64>,
    pub bbox_max: Vector3<f64>,
    /// Start of each level's rows in `params`, plus the total.
    level_offsets: Vec<usize>,
    /// `Σ_l rows_l × F`, rows-major per level.
    pub params: Vec<f64>,
}

/// The 8 weighted table rows touched by one query, per level.
#[derive(Clone, Debug)]
pub struct Lookup {
    /// Global row index (into `params / F`) and trilinear weight.
    pub corners: Vec<(usize, f64)>,
}

impl HashGrid {
    /// Zero-initialised grid; see [`HashGrid::init_uniform`].
    pub fn new(config: HashGridConfig, bbox_min: Vector3<f64>, bbox_max: Vector3<f64>) -> Result<Self> {
        config.validate()?;
        let mut level_offsets = vec![0];
        for l in 0..config.levels {
            let side = config.resolution(l) as u64 + 1;
            let rows = (side * side * side).min(config.table_size as u64) as usize;
            level_offsets.push(level_offsets[l] + rows);
        }
        let total = level_offsets[config.levels] * config.feats_per_level;
        Ok(Self {
            config,
            bbox_min,
            bbox_max,
            level_offsets,
            params: vec![0.0; total],
        })
    }

    pub fn init_uniform<R: Rng>(&mut self, rng: &mut R, bound: f64) {
        for v in &mut self.params {
            *v = rng.random_range(-bound..bound);
        }
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn level_rows(&self, level: usize) -> usize {
        self.level_offsets[level + 1] - self.level_offsets[level]
    }

    /// Table entry for lattice vertex `v` at `level`.
    pub fn entry(&self, level: usize, v: [u32; 3]) -> &[f64] {
        let f = self.config.feats_per_level;
        let row = self.level_offsets[level] + vertex_index(v, self.config.resolution(level), self.config.table_size);
        &self.params[row * f..(row + 1) * f]
    }

    /// Normalized position in `[0, 1]³`, clamped to the bounding box.
    fn unit(&self, x: &Vector3<f64>) -> [f64; 3] {
        let mut u = [0.0; 3];
        for k in 0..3 {
            let extent = self.bbox_max[k] - self.bbox_min[k];
            let t = if extent > 0.0 { (x[k] - self.bbox_min[k]) / extent } else { 0.0 };
            u[k] = t.clamp(0.0, 1.0);
        }
        u
    }

    pub fn lookup(&self, x: &Vector3<f64>) -> Lookup {
        let u = self.unit(x);
        let mut corners = Vec::with_capacity(self.config.levels * 8);
        for level in 0..self.config.levels {
            let res = self.config.resolution(level);
            let mut cell = [0u32; 3];
            let mut frac = [0.0; 3];
            for k in 0..3 {
                let s = u[k] * res as f64;
                let c = (s.floor() as usize).min(res.saturating_sub(1));
                cell[k] = c as u32;
                frac[k] = s - c as f64;
            }
            for corner in 0..8u32 {
                let mut v = cell;
                let mut w = 1.0;
                for k in 0..3 {
                    if corner >> k & 1 == 1 {
                        v[k] += 1;
                        w *= frac[k];
                    } else {
                        w *= 1.0 - frac[k];
                    }
                }
                let row = self.level_offsets[level] + vertex_index(v, res, self.config.table_size);
                corners.push((row, w));
            }
        }
        Lookup { corners }
    }

    pub fn encode_lookup(&self, lookup: &Lookup, out: &mut [f64]) {
        let f = self.config.feats_per_level;
        out.iter_mut().for_each(|v| *v = 0.0);
        for (level, chunk) in lookup.corners.chunks(8).enumerate() {
            let dst = &mut out[level * f..(level + 1) * f];
            for &(row, w) in chunk {
                for (d, p) in dst.iter_mut().zip(&self.params[row * f..(row + 1) * f]) {
                    *d += w * p;
                }
            }
        }
    }

    pub fn encode(&self, x: &Vector3<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.encode_lookup(&self.lookup(x), &mut out);
        out
    }

    /// Adds `∂L/∂params` for one query with upstream gradient `grad_out` into `grad`.
    pub fn backward_lookup(&self, lookup: &Lookup, grad_out: &[f64], grad: &mut [f64], touched: &mut Vec<usize>) {
        let f = self.config.feats_per_level;
        for (level, chunk) in lookup.corners.chunks(8).enumerate() {
            let g = &grad_out[level * f..(level + 1) * f];
            for &(row, w) in chunk {
                for (d, gv) in grad[row * f..(row + 1) * f].iter_mut().zip(g) {
                    *d += w * gv;
                }
                touched.push(row);
            }
        }
    }
}
