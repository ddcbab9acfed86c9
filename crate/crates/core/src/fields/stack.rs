use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;

use super::hashgrid::{HashGrid, HashGridConfig, Lookup};
use super::head::{Mlp, MlpCache};
use crate::error::{Error, Result};
use crate::scene::sigmoid;

/// Points per work unit in the batched passes; fixed for reproducible sums.
const POINT_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct FieldConfig {
    pub grid: HashGridConfig,
    pub hidden: usize,
    pub d_clip: usize,
    pub d_inst: usize,
    pub d_reg: usize,
    /// Number of language scale levels S; scales live in `[0, S − 1]`.
    pub scale_levels: usize,
    pub share_grids: bool,
    /// Replace the grids with free per-Gaussian code tables.
    pub per_gaussian: bool,
    pub init_bound: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            grid: HashGridConfig::default(),
            hidden: 64,
            d_clip: 32,
            d_inst: 8,
            d_reg: 16,
            scale_levels: 3,
            share_grids: false,
            per_gaussian: false,
            init_bound: 1e-4,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.hidden == 0 || self.d_clip == 0 || self.d_inst == 0 || self.scale_levels == 0 {
            return Err(Error::Config("field widths and scale_levels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    Hash(HashGrid),
    /// One free `dim`-vector per Gaussian, indexed by primitive index.
    PerGaussian { dim: usize, params: Vec<f64> },
}

#[derive(Clone, Debug)]
pub enum EncoderLookup {
    Hash(Lookup),
    Row(usize),
}

impl Encoder {
    pub fn dim(&self) -> usize {
        match self {
            Encoder::Hash(g) => g.output_dim(),
            Encoder::PerGaussian { dim, .. } => *dim,
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Encoder::Hash(g) => &g.params,
            Encoder::PerGaussian { params, .. } => params,
        }
    }

    pub fn params_mut(&mut self) -> &mut Vec<f64> {
        match self {
            Encoder::Hash(g) => &mut g.params,
            Encoder::PerGaussian { params, .. } => params,
        }
    }

    pub fn lookup(&self, index: usize, x: &Vector3<f64>) -> EncoderLookup {
        match self {
            Encoder::Hash(g) => EncoderLookup::Hash(g.lookup(x)),
            Encoder::PerGaussian { .. } => EncoderLookup::Row(index),
        }
    }

    pub fn encode(&self, lookup: &EncoderLookup, out: &mut [f64]) {
        match (self, lookup) {
            (Encoder::Hash(g), EncoderLookup::Hash(l)) => g.encode_lookup(l, out),
            (Encoder::PerGaussian { dim, params }, EncoderLookup::Row(r)) => {
                out.copy_from_slice(&params[r * dim..(r + 1) * dim])
            }
            _ => unreachable!("lookup from a different encoder kind"),
        }
    }

    /// Returns the touched row ids (row width = `row_width()`).
    fn backward(&self, lookup: &EncoderLookup, grad_out: &[f64], grad: &mut [f64], touched: &mut Vec<usize>) {
        match (self, lookup) {
            (Encoder::Hash(g), EncoderLookup::Hash(l)) => g.backward_lookup(l, grad_out, grad, touched),
            (Encoder::PerGaussian { dim, .. }, EncoderLookup::Row(r)) => {
                for (d, g) in grad[r * dim..(r + 1) * dim].iter_mut().zip(grad_out) {
                    *d += g;
                }
                touched.push(*r);
            }
            _ => unreachable!("lookup from a different encoder kind"),
        }
    }

    fn row_width(&self) -> usize {
        match self {
            Encoder::Hash(g) => g.config.feats_per_level,
            Encoder::PerGaussian { dim, .. } => *dim,
        }
    }
}

/// Language field, instance field (own or shared encoder) and the
/// dense-regularisation head, which reads the language code.
#[derive(Clone, Debug, PartialEq)]
pub struct HashFieldStack {
    pub config: FieldConfig,
    pub language_encoder: Encoder,
    /// `None` when the instance head shares the language encoder.
    pub instance_encoder: Option<Encoder>,
    pub language_head: Mlp,
    pub instance_head: Mlp,
    pub reg_head: Mlp,
}

/// Field outputs at one Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct PointFeatures {
    pub embedding: Vec<f64>,
    pub scale: f64,
    pub instance: Vec<f64>,
    pub reg: Vec<f64>,
}

/// Per-point forward state kept for the backward pass.
pub struct PointCache {
    lang_lookup: EncoderLookup,
    inst_lookup: Option<EncoderLookup>,
    lang_code: Vec<f64>,
    inst_code: Vec<f64>,
    lang_cache: MlpCache,
    inst_cache: MlpCache,
    reg_cache: MlpCache,
    raw_norm: f64,
    raw_scale_sigmoid: f64,
}

pub struct Batch {
    pub features: Vec<PointFeatures>,
    caches: Vec<PointCache>,
}

/// Upstream gradients for one point.
#[derive(Clone, Debug, Default)]
pub struct PointGradient {
    pub embedding: Vec<f64>,
    pub scale: f64,
    pub instance: Vec<f64>,
    pub reg: Vec<f64>,
}

/// Gradients for every parameter buffer, in [`HashFieldStack::buffers`] order.
pub struct FieldGradients {
    pub buffers: Vec<Vec<f64>>,
    /// Sorted touched element indices per buffer; `None` means dense.
    pub touched: Vec<Option<Vec<usize>>>,
}

/// Bias of the raw scale channel at initialisation; starts training near the
/// finest supervision level.
pub const INITIAL_SCALE_LOGIT: f64 = -3.0;

impl HashFieldStack {
    /// Grids uniform in `±init_bound`, He-initialised heads.
    /// `n_gaussians` sizes the per-Gaussian tables and is otherwise unused.
    pub fn new<R: Rng>(config: FieldConfig, bbox: (Vector3<f64>, Vector3<f64>), n_gaussians: usize, rng: &mut R) -> Result<Self> {
        let mut s = Self::zeroed(config, bbox, n_gaussians)?;
        let bound = s.config.init_bound;
        for enc in std::iter::once(&mut s.language_encoder).chain(s.instance_encoder.as_mut()) {
            for v in enc.params_mut().iter_mut() {
                *v = if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 };
            }
        }
        s.language_head.init(rng);
        // the scale channel is the last language output
        *s.language_head.params.last_mut().expect("language head has outputs") = INITIAL_SCALE_LOGIT;
        s.instance_head.init(rng);
        s.reg_head.init(rng);
        Ok(s)
    }

    /// All parameters zero; the layout matches [`HashFieldStack::new`].
    pub fn zeroed(config: FieldConfig, bbox: (Vector3<f64>, Vector3<f64>), n_gaussians: usize) -> Result<Self> {
        config.validate()?;
        let make = || -> Result<Encoder> {
            if config.per_gaussian {
                let dim = config.grid.output_dim();
                Ok(Encoder::PerGaussian {
                    dim,
                    params: vec![0.0; n_gaussians * dim],
                })
            } else {
                Ok(Encoder::Hash(HashGrid::new(config.grid.clone(), bbox.0, bbox.1)?))
            }
        };
        let language_encoder = make()?;
        let instance_encoder = if config.share_grids { None } else { Some(make()?) };
        let code = config.grid.output_dim();
        Ok(Self {
            language_head: Mlp::new(code, config.hidden, config.d_clip + 1),
            instance_head: Mlp::new(code, config.hidden, config.d_inst),
            reg_head: Mlp::new(code, config.hidden, config.d_reg),
            config,
            language_encoder,
            instance_encoder,
        })
    }

    pub fn instance_encoder(&self) -> &Encoder {
        self.instance_encoder.as_ref().unwrap_or(&self.language_encoder)
    }

    pub fn has_hash_tables(&self) -> bool {
        matches!(self.language_encoder, Encoder::Hash(_))
    }

    /// Parameter buffers in declaration order.
    pub fn buffers(&self) -> Vec<&[f64]> {
        let mut v = vec![self.language_encoder.params()];
        if let Some(e) = &self.instance_encoder {
            v.push(e.params());
        }
        v.extend([&self.language_head.params[..], &self.instance_head.params, &self.reg_head.params]);
        v
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = vec![self.language_encoder.params_mut()];
        if let Some(e) = &mut self.instance_encoder {
            v.push(e.params_mut());
        }
        v.extend([
            &mut self.language_head.params,
            &mut self.instance_head.params,
            &mut self.reg_head.params,
        ]);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }

    fn forward_point(&self, index: usize, x: &Vector3<f64>) -> (PointFeatures, PointCache) {
        let c = &self.config;
        let code = c.grid.output_dim();
        let lang_lookup = self.language_encoder.lookup(index, x);
        let mut lang_code = vec![0.0; code];
        self.language_encoder.encode(&lang_lookup, &mut lang_code);
        let (inst_lookup, inst_code) = match &self.instance_encoder {
            Some(e) => {
                let l = e.lookup(index, x);
                let mut v = vec![0.0; code];
                e.encode(&l, &mut v);
                (Some(l), v)
            }
            None => (None, lang_code.clone()),
        };
        let mut raw = vec![0.0; c.d_clip + 1];
        let mut lang_cache = MlpCache::default();
        self.language_head.forward(&lang_code, &mut raw, &mut lang_cache);
        let mut instance = vec![0.0; c.d_inst];
        let mut inst_cache = MlpCache::default();
        self.instance_head.forward(&inst_code, &mut instance, &mut inst_cache);
        let mut reg = vec![0.0; c.d_reg];
        let mut reg_cache = MlpCache::default();
        self.reg_head.forward(&lang_code, &mut reg, &mut reg_cache);

        let raw_norm = raw[..c.d_clip].iter().map(|v| v * v).sum::<f64>().sqrt();
        let embedding = if raw_norm > 0.0 {
            raw[..c.d_clip].iter().map(|v| v / raw_norm).collect()
        } else {
            let mut e = vec![0.0; c.d_clip];
            e[0] = 1.0;
            e
        };
        let sg = sigmoid(raw[c.d_clip]);
        let scale = (c.scale_levels - 1) as f64 * sg;
        (
            PointFeatures {
                embedding,
                scale,
                instance,
                reg,
            },
            PointCache {
                lang_lookup,
                inst_lookup,
                lang_code,
                inst_code,
                lang_cache,
                inst_cache,
                reg_cache,
                raw_norm,
                raw_scale_sigmoid: sg,
            },
        )
    }

    /// Field outputs at Gaussian `index` located at `x`.
    pub fn point(&self, index: usize, x: &Vector3<f64>) -> PointFeatures {
        self.forward_point(index, x).0
    }

    /// Language embedding and scale at `x` (grid encoders only use `x`).
    pub fn language_features(&self, index: usize, x: &Vector3<f64>) -> (Vec<f64>, f64) {
        let p = self.point(index, x);
        (p.embedding, p.scale)
    }

    pub fn instance_features(&self, index: usize, x: &Vector3<f64>) -> Vec<f64> {
        self.point(index, x).instance
    }

    /// Evaluates the Gaussians `indices` at `positions[i]` for each listed index.
    pub fn forward(&self, indices: &[usize], positions: &[Vector3<f64>]) -> Batch {
        let (features, caches) = indices
            .par_iter()
            .map(|&i| self.forward_point(i, &positions[i]))
            .unzip();
        Batch { features, caches }
    }

    /// Same as `forward` for every index in `0..positions.len()`.
    pub fn evaluate_all(&self, positions: &[Vector3<f64>]) -> Vec<PointFeatures> {
        let idx: Vec<usize> = (0..positions.len()).collect();
        self.forward(&idx, positions).features
    }

    pub fn backward(&self, batch: &Batch, grads: &[PointGradient]) -> FieldGradients {
        let c = &self.config;
        let code = c.grid.output_dim();
        let head_sizes = [
            self.language_head.params.len(),
            self.instance_head.params.len(),
            self.reg_head.params.len(),
        ];
        struct ChunkOut {
            heads: [Vec<f64>; 3],
            code_grads: Vec<(Vec<f64>, Vec<f64>)>,
        }
        let chunks: Vec<ChunkOut> = batch
            .caches
            .par_chunks(POINT_CHUNK)
            .zip(grads.par_chunks(POINT_CHUNK))
            .zip(batch.features.par_chunks(POINT_CHUNK))
            .map(|((caches, grads), feats)| {
                let mut heads = head_sizes.map(|n| vec![0.0; n]);
                let mut code_grads = Vec::with_capacity(caches.len());
                let mut g_raw = vec![0.0; c.d_clip + 1];
                let mut tmp = vec![0.0; code];
                for ((pc, g), feat) in caches.iter().zip(grads).zip(feats) {
                    let mut g_lang_code = vec![0.0; code];
                    let mut g_inst_code = vec![0.0; code];
                    // through the L2 normalisation and the scale logistic
                    let e = &feat.embedding;
                    if pc.raw_norm > 0.0 {
                        let e_dot: f64 = g.embedding.iter().zip(e).map(|(a, b)| a * b).sum();
                        for k in 0..c.d_clip {
                            g_raw[k] = (g.embedding[k] - e[k] * e_dot) / pc.raw_norm;
                        }
                    } else {
                        g_raw[..c.d_clip].iter_mut().for_each(|v| *v = 0.0);
                    }
                    let sg = pc.raw_scale_sigmoid;
                    g_raw[c.d_clip] = g.scale * (c.scale_levels - 1) as f64 * sg * (1.0 - sg);
                    self.language_head.backward(&pc.lang_code, &pc.lang_cache, &g_raw, &mut heads[0], &mut tmp);
                    g_lang_code.copy_from_slice(&tmp);
                    self.reg_head.backward(&pc.lang_code, &pc.reg_cache, &g.reg, &mut heads[2], &mut tmp);
                    for (a, b) in g_lang_code.iter_mut().zip(&tmp) {
                        *a += b;
                    }
                    self.instance_head.backward(&pc.inst_code, &pc.inst_cache, &g.instance, &mut heads[1], &mut tmp);
                    if pc.inst_lookup.is_some() {
                        g_inst_code.copy_from_slice(&tmp);
                    } else {
                        for (a, b) in g_lang_code.iter_mut().zip(&tmp) {
                            *a += b;
                        }
                    }
                    code_grads.push((g_lang_code, g_inst_code));
                }
                ChunkOut { heads, code_grads }
            })
            .collect();

        let mut lang_enc = vec![0.0; self.language_encoder.params().len()];
        let mut lang_rows = Vec::new();
        let mut inst_enc = self.instance_encoder.as_ref().map(|e| vec![0.0; e.params().len()]);
        let mut inst_rows = Vec::new();
        let mut heads = head_sizes.map(|n| vec![0.0; n]);
        let mut caches = batch.caches.iter();
        for chunk in &chunks {
            for (h, part) in heads.iter_mut().zip(&chunk.heads) {
                for (a, b) in h.iter_mut().zip(part) {
                    *a += b;
                }
            }
            for (gl, gi) in &chunk.code_grads {
                let pc = caches.next().expect("cache per gradient");
                self.language_encoder.backward(&pc.lang_lookup, gl, &mut lang_enc, &mut lang_rows);
                if let (Some(enc), Some(buf), Some(l)) = (&self.instance_encoder, inst_enc.as_mut(), &pc.inst_lookup) {
                    enc.backward(l, gi, buf, &mut inst_rows);
                }
            }
        }
        let expand = |mut rows: Vec<usize>, width: usize| -> Option<Vec<usize>> {
            rows.sort_unstable();
            rows.dedup();
            Some(rows.iter().flat_map(|r| r * width..(r + 1) * width).collect())
        };
        let mut buffers = vec![lang_enc];
        let mut touched = vec![expand(lang_rows, self.language_encoder.row_width())];
        if let Some(buf) = inst_enc {
            buffers.push(buf);
            touched.push(expand(inst_rows, self.instance_encoder().row_width()));
        }
        for h in heads {
            buffers.push(h);
            touched.push(None);
        }
        FieldGradients { buffers, touched }
    }
}
