//! Joint optimisation of scene geometry and the feature fields.

mod adam;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::Adam;

use crate::error::{Error, Result};
use crate::fields::{FieldConfig, HashFieldStack, PointGradient};
use crate::losses::{instance_loss, language_loss, reg_loss, rgb_loss, total_loss, LossParts, LossWeights};
use crate::raster::{Attributes, BackwardRequest, FeatureMap, Frame, RenderOptions};
use crate::scene::{GaussianScene, PARAMS_PER_PRIMITIVE};
use crate::supervision::SupervisionSet;

pub const GAUSSIAN_EPS: f64 = 1e-15;
pub const FIELD_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr_gaussians: f64,
    pub lr_fields: f64,
    /// Leading fraction of steps that optimise the RGB loss alone.
    pub warmup_rgb_fraction: f64,
    pub weights: LossWeights,
    /// Let semantic losses move geometry (means, covariances, opacity); off
    /// by default, so geometry follows the RGB loss alone.
    pub geometry_from_semantics: bool,
    pub train_opacity: bool,
    /// Geometry stops changing once the warmup ends.
    pub freeze_geometry_after_warmup: bool,
    pub seed: u64,
    pub views_per_step: usize,
    pub fields: FieldConfig,
    pub render: RenderOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            lr_gaussians: 0.0025,
            lr_fields: 0.001,
            warmup_rgb_fraction: 0.2,
            weights: LossWeights::default(),
            geometry_from_semantics: false,
            train_opacity: true,
            freeze_geometry_after_warmup: false,
            seed: 0,
            views_per_step: 1,
            fields: FieldConfig::default(),
            render: RenderOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.lr_gaussians > 0.0 && self.lr_fields > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_rgb_fraction) {
            return Err(Error::Config(format!(
                "warmup_rgb_fraction must lie in [0, 1), got {}",
                self.warmup_rgb_fraction
            )));
        }
        if self.views_per_step == 0 {
            return Err(Error::Config("views_per_step must be at least 1".into()));
        }
        self.weights.validate()?;
        self.fields.validate()
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_rgb_fraction * self.iterations as f64).floor() as usize
    }
}

/// `full`, `no_mhe` (per-Gaussian feature tables instead of hash grids) or
/// `no_joint` (geometry frozen after the RGB warmup).
pub fn ablation_variant(config: &TrainConfig, name: &str) -> Result<TrainConfig> {
    let mut c = config.clone();
    match name {
        "full" => {}
        "no_mhe" => c.fields.per_gaussian = true,
        "no_joint" => c.freeze_geometry_after_warmup = true,
        other => return Err(Error::Config(format!("unknown ablation variant {other:?} (full, no_mhe, no_joint)"))),
    }
    Ok(c)
}

/// Channel ranges of the combined attribute rendered in the semantic phase:
/// `[color | embedding | scale | instance | reg]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Channels {
    pub d_clip: usize,
    pub d_inst: usize,
    pub d_reg: usize,
}

impl Channels {
    pub fn new(f: &FieldConfig) -> Self {
        Self {
            d_clip: f.d_clip,
            d_inst: f.d_inst,
            d_reg: f.d_reg,
        }
    }
    pub fn embedding(&self) -> usize {
        3
    }
    pub fn scale(&self) -> usize {
        3 + self.d_clip
    }
    pub fn instance(&self) -> usize {
        4 + self.d_clip
    }
    pub fn reg(&self) -> usize {
        4 + self.d_clip + self.d_inst
    }
    pub fn dim(&self) -> usize {
        4 + self.d_clip + self.d_inst + self.d_reg
    }
}

/// Hash-grid bounding box: the scene bounds padded by 10% per side.
pub fn field_bounds(scene: &GaussianScene) -> (Vector3<f64>, Vector3<f64>) {
    let (lo, hi) = scene.bounds().unwrap_or((Vector3::repeat(-1.0), Vector3::repeat(1.0)));
    let pad = (hi - lo).map(|v| 0.1 * v.max(1e-3));
    (lo - pad, hi + pad)
}

/// Freshly initialised fields for `scene`, seeded from the config.
pub fn build_fields(config: &TrainConfig, scene: &GaussianScene) -> Result<HashFieldStack> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xf1e1_d5);
    HashFieldStack::new(config.fields.clone(), field_bounds(scene), scene.len(), &mut rng)
}

/// One row of the loss log; warmup rows carry zeros for inactive terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub parts: LossParts,
    pub total: f64,
}

pub const LOG_HEADER: &str = "step,rgb,clip,pos,neg,reg,total";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let p = r.parts;
        s.push_str(&format!(
            "{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}\n",
            r.step, p.rgb, p.clip, p.pos, p.neg, p.reg, r.total
        ));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub scene: GaussianScene,
    pub fields: HashFieldStack,
    pub log: Vec<LogRow>,
}

fn flat_params(scene: &GaussianScene) -> Vec<f64> {
    scene.primitives.iter().flat_map(|p| p.to_params()).collect()
}

fn write_params(scene: &mut GaussianScene, params: &[f64]) {
    for (p, chunk) in scene.primitives.iter_mut().zip(params.chunks_exact(PARAMS_PER_PRIMITIVE)) {
        p.set_params(chunk);
    }
}

/// Per-view losses and, when requested, gradients for both parameter groups.
struct ViewOutcome {
    parts: LossParts,
    gaussian_grad: Option<Vec<f64>>,
    field_grad: Option<crate::fields::FieldGradients>,
}

struct Context<'a> {
    config: &'a TrainConfig,
    supervision: &'a SupervisionSet,
    channels: Channels,
}

impl Context<'_> {
    fn positions(scene: &GaussianScene) -> Vec<Vector3<f64>> {
        scene.primitives.iter().map(|p| p.position).collect()
    }

    fn rgb_view(&self, scene: &GaussianScene, view: usize, want_grad: bool) -> Result<ViewOutcome> {
        let cam = &self.supervision.cameras[view];
        let frame = Frame::new(scene, cam, self.config.render);
        let rendered = frame.render(Attributes::Color)?;
        let loss = rgb_loss(&rendered, &self.supervision.views[view].rgb)?;
        let gaussian_grad = if want_grad {
            let g = frame.backward(Attributes::Color, &loss.grad, None, &BackwardRequest::all(3))?;
            Some(g.primitives.iter().flat_map(|p| p.to_params()).collect())
        } else {
            None
        };
        Ok(ViewOutcome {
            parts: LossParts {
                rgb: loss.value,
                ..LossParts::default()
            },
            gaussian_grad,
            field_grad: None,
        })
    }

    /// `want`: (gaussian gradient, field gradient).
    fn semantic_view(
        &self,
        scene: &GaussianScene,
        fields: &HashFieldStack,
        view: usize,
        want: (bool, bool),
    ) -> Result<ViewOutcome> {
        let ch = self.channels;
        let dim = ch.dim();
        let cam = &self.supervision.cameras[view];
        let sup = &self.supervision.views[view];
        let weights = &self.config.weights;
        let frame = Frame::new(scene, cam, self.config.render);
        let visible: Vec<usize> = frame
            .contributing_mask()
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| c.then_some(i))
            .collect();
        let positions = Self::positions(scene);
        let batch = fields.forward(&visible, &positions);
        let mut table = vec![0.0; scene.len() * dim];
        for (i, p) in scene.primitives.iter().enumerate() {
            table[i * dim..i * dim + 3].copy_from_slice(p.color.as_slice());
        }
        for (&i, f) in visible.iter().zip(&batch.features) {
            let row = &mut table[i * dim..(i + 1) * dim];
            row[ch.embedding()..ch.scale()].copy_from_slice(&f.embedding);
            row[ch.scale()] = f.scale;
            row[ch.instance()..ch.reg()].copy_from_slice(&f.instance);
            row[ch.reg()..].copy_from_slice(&f.reg);
        }
        let attrs = Attributes::Features { dim, values: &table };
        let rendered = frame.render(attrs)?;

        let rgb = rgb_loss(&rendered.channels(0, 3), &sup.rgb)?;
        let emb_map = rendered.channels(ch.embedding(), ch.d_clip);
        let scale_map = rendered.channels(ch.scale(), 1);
        let lang = language_loss(&emb_map, &scale_map, &sup.language, weights.huber_delta)?;
        let inst = instance_loss(&rendered.channels(ch.instance(), ch.d_inst), &sup.mask, weights)?;
        let reg = reg_loss(&rendered.channels(ch.reg(), ch.d_reg), &sup.reg, weights.huber_delta)?;
        let parts = LossParts {
            rgb: rgb.value,
            clip: lang.value,
            pos: inst.pos,
            neg: inst.neg,
            reg: reg.value,
        };
        if !want.0 && !want.1 {
            return Ok(ViewOutcome {
                parts,
                gaussian_grad: None,
                field_grad: None,
            });
        }

        let mut out_grad = vec![0.0; rendered.data.len()];
        for p in 0..rendered.pixel_count() {
            let row = &mut out_grad[p * dim..(p + 1) * dim];
            row[..3].copy_from_slice(&rgb.grad[p * 3..p * 3 + 3]);
            for k in 0..ch.d_clip {
                row[ch.embedding() + k] = weights.lambda_lang * lang.grad_embedding[p * ch.d_clip + k];
            }
            row[ch.scale()] = weights.lambda_lang * lang.grad_scale[p];
            for k in 0..ch.d_inst {
                row[ch.instance() + k] = weights.lambda_inst * inst.grad[p * ch.d_inst + k];
            }
            for k in 0..ch.d_reg {
                row[ch.reg() + k] = weights.lambda_reg * reg.grad[p * ch.d_reg + k];
            }
        }
        let geometry_channels = if !want.0 {
            0..0
        } else if self.config.geometry_from_semantics {
            0..dim
        } else {
            0..3
        };
        let request = BackwardRequest {
            geometry_channels,
            attributes: true,
        };
        let g = frame.backward(attrs, &out_grad, None, &request)?;

        let gaussian_grad = want.0.then(|| {
            let mut flat: Vec<f64> = g.primitives.iter().flat_map(|p| p.to_params()).collect();
            for i in 0..scene.len() {
                // color lives in the first three attribute channels
                for k in 0..3 {
                    flat[i * PARAMS_PER_PRIMITIVE + 11 + k] = g.attributes[i * dim + k];
                }
            }
            flat
        });
        let field_grad = want.1.then(|| {
            let point_grads: Vec<PointGradient> = visible
                .iter()
                .map(|&i| {
                    let row = &g.attributes[i * dim..(i + 1) * dim];
                    PointGradient {
                        embedding: row[ch.embedding()..ch.scale()].to_vec(),
                        scale: row[ch.scale()],
                        instance: row[ch.instance()..ch.reg()].to_vec(),
                        reg: row[ch.reg()..].to_vec(),
                    }
                })
                .collect();
            fields.backward(&batch, &point_grads)
        });
        Ok(ViewOutcome {
            parts,
            gaussian_grad,
            field_grad,
        })
    }
}

/// Snapshot handed to the per-step observer (used for checkpointing).
pub struct StepState<'a> {
    pub row: &'a LogRow,
    pub scene: &'a GaussianScene,
    pub fields: &'a HashFieldStack,
}

pub fn train(
    scene: GaussianScene,
    fields: HashFieldStack,
    supervision: &SupervisionSet,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    train_with(scene, fields, supervision, config, |_| Ok(()))
}

pub fn train_with(
    mut scene: GaussianScene,
    mut fields: HashFieldStack,
    supervision: &SupervisionSet,
    config: &TrainConfig,
    mut observer: impl FnMut(&StepState) -> Result<()>,
) -> Result<TrainOutput> {
    config.validate()?;
    supervision.validate()?;
    scene.validate()?;
    check_compatible(&fields, supervision, config)?;
    let ctx = Context {
        config,
        supervision,
        channels: Channels::new(&fields.config),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = flat_params(&scene);
    let mut gauss_opt = Adam::new(params.len(), config.lr_gaussians, GAUSSIAN_EPS);
    let mut field_opts: Vec<Adam> = fields
        .buffers()
        .iter()
        .map(|b| Adam::new(b.len(), config.lr_fields, FIELD_EPS))
        .collect();
    let warmup = config.warmup_steps();
    let n_views = supervision.views.len();
    let inv_views = 1.0 / config.views_per_step as f64;
    let mut log = Vec::with_capacity(config.iterations);

    for step in 0..config.iterations {
        let semantic = step >= warmup;
        let update_geometry = !(semantic && config.freeze_geometry_after_warmup);
        let views: Vec<usize> = (0..config.views_per_step).map(|_| rng.random_range(0..n_views)).collect();
        let mut parts = LossParts::default();
        let mut g_gauss = vec![0.0; params.len()];
        let mut g_fields: Option<crate::fields::FieldGradients> = None;
        for &v in &views {
            let outcome = if semantic {
                ctx.semantic_view(&scene, &fields, v, (update_geometry, true))?
            } else {
                ctx.rgb_view(&scene, v, true)?
            };
            parts.rgb += outcome.parts.rgb * inv_views;
            parts.clip += outcome.parts.clip * inv_views;
            parts.pos += outcome.parts.pos * inv_views;
            parts.neg += outcome.parts.neg * inv_views;
            parts.reg += outcome.parts.reg * inv_views;
            if let Some(g) = outcome.gaussian_grad {
                for (a, b) in g_gauss.iter_mut().zip(g) {
                    *a += b * inv_views;
                }
            }
            if let Some(fg) = outcome.field_grad {
                g_fields = Some(match g_fields.take() {
                    None => scale_field_grad(fg, inv_views),
                    Some(acc) => merge_field_grads(acc, scale_field_grad(fg, inv_views)),
                });
            }
        }
        let total = total_loss(&parts, &config.weights, step)?;

        if update_geometry {
            if !config.train_opacity {
                for i in 0..scene.len() {
                    g_gauss[i * PARAMS_PER_PRIMITIVE + 10] = 0.0;
                }
            }
            gauss_opt.step(&mut params, &g_gauss, None);
            write_params(&mut scene, &params);
        }
        if let Some(fg) = g_fields {
            for ((opt, buf), (grad, touched)) in field_opts
                .iter_mut()
                .zip(fields.buffers_mut())
                .zip(fg.buffers.iter().zip(&fg.touched))
            {
                opt.step(buf, grad, touched.as_deref());
            }
        }
        let row = LogRow { step, parts, total };
        observer(&StepState {
            row: &row,
            scene: &scene,
            fields: &fields,
        })?;
        log.push(row);
    }
    Ok(TrainOutput { scene, fields, log })
}

fn scale_field_grad(mut g: crate::fields::FieldGradients, s: f64) -> crate::fields::FieldGradients {
    if s != 1.0 {
        g.buffers.iter_mut().flatten().for_each(|v| *v *= s);
    }
    g
}

fn merge_field_grads(
    mut a: crate::fields::FieldGradients,
    b: crate::fields::FieldGradients,
) -> crate::fields::FieldGradients {
    for (((ga, ta), gb), tb) in a.buffers.iter_mut().zip(a.touched.iter_mut()).zip(b.buffers).zip(b.touched) {
        for (x, y) in ga.iter_mut().zip(gb) {
            *x += y;
        }
        *ta = match (ta.take(), tb) {
            (Some(x), Some(y)) => {
                let mut m: Vec<usize> = x.into_iter().chain(y).collect();
                m.sort_unstable();
                m.dedup();
                Some(m)
            }
            _ => None,
        };
    }
    a
}

fn check_compatible(fields: &HashFieldStack, sup: &SupervisionSet, config: &TrainConfig) -> Result<()> {
    let v = &sup.views[0];
    let f = &fields.config;
    if v.language.len() != f.scale_levels {
        return Err(Error::Dimension(format!(
            "supervision has {} scale levels, fields expect {}",
            v.language.len(),
            f.scale_levels
        )));
    }
    if v.language[0].dim != f.d_clip {
        return Err(Error::Dimension(format!(
            "language targets have {} channels, fields produce {}",
            v.language[0].dim, f.d_clip
        )));
    }
    if v.reg.dim != f.d_reg {
        return Err(Error::Dimension(format!(
            "reg targets have {} channels, fields produce {}",
            v.reg.dim, f.d_reg
        )));
    }
    if f.per_gaussian != config.fields.per_gaussian {
        return Err(Error::Config("field stack encoder does not match the training config".into()));
    }
    Ok(())
}

/// Every loss term averaged over all views, at the full objective.
pub fn evaluate_losses(
    scene: &GaussianScene,
    fields: &HashFieldStack,
    supervision: &SupervisionSet,
    config: &TrainConfig,
) -> Result<(LossParts, f64)> {
    let ctx = Context {
        config,
        supervision,
        channels: Channels::new(&fields.config),
    };
    let mut parts = LossParts::default();
    let n = supervision.views.len() as f64;
    for v in 0..supervision.views.len() {
        let o = ctx.semantic_view(scene, fields, v, (false, false))?;
        parts.rgb += o.parts.rgb / n;
        parts.clip += o.parts.clip / n;
        parts.pos += o.parts.pos / n;
        parts.neg += o.parts.neg / n;
        parts.reg += o.parts.reg / n;
    }
    let total = total_loss(&parts, &config.weights, 0)?;
    Ok((parts, total))
}

/// Renders the semantic channels of one view (for inspection and export).
pub fn render_semantics(
    scene: &GaussianScene,
    fields: &HashFieldStack,
    camera: &crate::scene::Camera,
    render: RenderOptions,
) -> Result<FeatureMap> {
    let ch = Channels::new(&fields.config);
    let dim = ch.dim();
    let positions: Vec<Vector3<f64>> = scene.primitives.iter().map(|p| p.position).collect();
    let feats = fields.evaluate_all(&positions);
    let mut table = vec![0.0; scene.len() * dim];
    for (i, (p, f)) in scene.primitives.iter().zip(&feats).enumerate() {
        let row = &mut table[i * dim..(i + 1) * dim];
        row[..3].copy_from_slice(p.color.as_slice());
        row[ch.embedding()..ch.scale()].copy_from_slice(&f.embedding);
        row[ch.scale()] = f.scale;
        row[ch.instance()..ch.reg()].copy_from_slice(&f.instance);
        row[ch.reg()..].copy_from_slice(&f.reg);
    }
    Frame::new(scene, camera, render).render(Attributes::Features { dim, values: &table })
}

#[cfg(test)]
mod tests;
