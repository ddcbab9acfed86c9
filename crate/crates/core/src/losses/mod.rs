//! Training objectives. Every loss returns its value together with the
//! gradient with respect to the rendered map(s) it reads.

mod ssim;

use std::collections::BTreeMap;

pub use ssim::{ssim, C1, C2, WINDOW, WINDOW_SIGMA};

use crate::error::{Error, Result};
use crate::raster::FeatureMap;

/// Masks smaller than this are skipped by the instance loss.
pub const MIN_MASK_PIXELS: usize = 8;
pub const L1_WEIGHT: f64 = 0.8;
pub const SSIM_WEIGHT: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_lang: f64,
    pub lambda_inst: f64,
    pub lambda_reg: f64,
    /// Contrastive margin on squared representative distance.
    pub gamma: f64,
    pub w_neg: f64,
    pub huber_delta: f64,
    /// Treat mask representatives as constants in the pull term.
    pub stop_grad_representatives: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_lang: 0.5,
            lambda_inst: 1.0,
            lambda_reg: 0.5,
            gamma: 1.0,
            w_neg: 0.1,
            huber_delta: 1.0,
            stop_grad_representatives: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_lang", self.lambda_lang),
            ("lambda_inst", self.lambda_inst),
            ("lambda_reg", self.lambda_reg),
            ("w_neg", self.w_neg),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.huber_delta > 0.0 && self.huber_delta.is_finite()) {
            return Err(Error::Config(format!("huber_delta must be positive, got {}", self.huber_delta)));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient, laid out like the map it was computed on.
#[derive(Clone, Debug)]
pub struct MapLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_shape(a: &FeatureMap, b: &FeatureMap, what: &str) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{what}: {}×{}×{} vs {}×{}×{}",
            a.height, a.width, a.dim, b.height, b.width, b.dim
        )))
    }
}

/// Huber penalty of a residual with Euclidean norm `n`.
pub fn huber(n: f64, delta: f64) -> f64 {
    if n <= delta { 0.5 * n * n } else { delta * (n - 0.5 * delta) }
}

/// Factor `f` with `∇_r huber(‖r‖) = f·r`.
fn huber_factor(n: f64, delta: f64) -> f64 {
    if n <= delta { 1.0 } else { delta / n }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `0.8·mean|x − y| + 0.2·(1 − SSIM(x, y))`.
pub fn rgb_loss(rendered: &FeatureMap, target: &FeatureMap) -> Result<MapLoss> {
    check_shape(rendered, target, "rgb loss")?;
    let n = rendered.data.len().max(1) as f64;
    let mut l1 = 0.0;
    let mut grad: Vec<f64> = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(x, y)| {
            let d = x - y;
            l1 += d.abs();
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            L1_WEIGHT * sign / n
        })
        .collect();
    let (s, sg) = ssim(rendered, target, true);
    for (g, d) in grad.iter_mut().zip(sg.unwrap_or_default()) {
        *g -= SSIM_WEIGHT * d;
    }
    Ok(MapLoss {
        value: L1_WEIGHT * l1 / n + SSIM_WEIGHT * (1.0 - s),
        grad,
    })
}

/// Language target at pixel `p` for a (clamped) scale `s`: linear interpolation
/// of the two bracketing levels, renormalised. Also returns the unnormalised
/// norm and bracketing levels, or `None` when the blend vanishes.
fn blend_target(levels: &[FeatureMap], p: usize, s: f64) -> Option<(Vec<f64>, f64, usize, f64)> {
    let top = levels.len() - 1;
    let lo = (s.floor() as usize).min(top.saturating_sub(1));
    let t = s - lo as f64;
    if top == 0 || t == 0.0 {
        // on a level the target is that level's map, already unit where nonzero
        let u = levels[lo].pixel(p).to_vec();
        let n = norm(&u);
        return (n > 1e-12).then_some((u, n, lo, 0.0));
    }
    let a = levels[lo].pixel(p);
    let b = levels[lo + 1].pixel(p);
    let u: Vec<f64> = a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect();
    let n = norm(&u);
    (n > 1e-12).then(|| (u.iter().map(|v| v / n).collect(), n, lo, t))
}

/// Interpolated, renormalised target at pixel `p` for scale `s` (clamped to
/// `[0, S − 1]`); the level map itself at integer `s`, zero where the blend
/// vanishes.
pub fn interpolated_target(levels: &[FeatureMap], p: usize, s: f64) -> Vec<f64> {
    let s = s.clamp(0.0, (levels.len() - 1) as f64);
    blend_target(levels, p, s).map_or_else(|| vec![0.0; levels[0].dim], |(t, ..)| t)
}

#[derive(Clone, Debug)]
pub struct LanguageLoss {
    pub value: f64,
    /// Pixels that entered the average.
    pub pixels: usize,
    pub grad_embedding: Vec<f64>,
    pub grad_scale: Vec<f64>,
}

/// Huber loss between the rendered language map and the scale-interpolated
/// target, averaged over pixels whose level-0 target is nonzero and whose
/// accumulated alpha exceeds 0.5. `scale` is a one-channel map.
pub fn language_loss(embedding: &FeatureMap, scale: &FeatureMap, levels: &[FeatureMap], delta: f64) -> Result<LanguageLoss> {
    if levels.is_empty() {
        return Err(Error::Shape("language loss needs at least one target level".into()));
    }
    for l in levels {
        check_shape(embedding, l, "language target")?;
    }
    if scale.dim != 1 || scale.pixel_count() != embedding.pixel_count() {
        return Err(Error::Shape("scale map must be one channel at the embedding resolution".into()));
    }
    let dim = embedding.dim;
    let top = (levels.len() - 1) as f64;
    let mut grad_embedding = vec![0.0; embedding.data.len()];
    let mut grad_scale = vec![0.0; scale.data.len()];
    let mut total = 0.0;
    let mut pixels = Vec::new();
    for p in 0..embedding.pixel_count() {
        if embedding.accumulated_alpha[p] <= 0.5 || levels[0].pixel(p).iter().all(|&v| v == 0.0) {
            continue;
        }
        let raw = scale.data[p];
        let s = raw.clamp(0.0, top);
        let Some((target, n_blend, lo, _)) = blend_target(levels, p, s) else {
            continue;
        };
        let x = embedding.pixel(p);
        let r: Vec<f64> = x.iter().zip(&target).map(|(a, b)| a - b).collect();
        let rn = norm(&r);
        total += huber(rn, delta);
        let f = huber_factor(rn, delta);
        for k in 0..dim {
            grad_embedding[p * dim + k] = f * r[k];
        }
        if levels.len() > 1 && (0.0..=top).contains(&raw) {
            // d target / dt = (I − t̂ t̂ᵀ)(b − a) / ‖u‖
            let (a, b) = (levels[lo].pixel(p), levels[lo + 1].pixel(p));
            let diff: Vec<f64> = b.iter().zip(a).map(|(y, x)| y - x).collect();
            let along: f64 = diff.iter().zip(&target).map(|(d, t)| d * t).sum();
            let mut g = 0.0;
            for k in 0..dim {
                let dt = (diff[k] - along * target[k]) / n_blend;
                g -= f * r[k] * dt;
            }
            grad_scale[p] = g;
        }
        pixels.push(p);
    }
    let count = pixels.len();
    if count > 0 {
        let inv = 1.0 / count as f64;
        for &p in &pixels {
            grad_embedding[p * dim..(p + 1) * dim].iter_mut().for_each(|g| *g *= inv);
            grad_scale[p] *= inv;
        }
        total *= inv;
    }
    Ok(LanguageLoss {
        value: total,
        pixels: count,
        grad_embedding,
        grad_scale,
    })
}

/// Mean feature over `pixels`; `None` for an empty set.
pub fn representative(map: &FeatureMap, pixels: &[usize]) -> Option<Vec<f64>> {
    if pixels.is_empty() {
        return None;
    }
    let mut r = vec![0.0; map.dim];
    for &p in pixels {
        r.iter_mut().zip(map.pixel(p)).for_each(|(a, v)| *a += v);
    }
    let inv = 1.0 / pixels.len() as f64;
    r.iter_mut().for_each(|v| *v *= inv);
    Some(r)
}

#[derive(Clone, Debug)]
pub struct InstanceLoss {
    pub pos: f64,
    pub neg: f64,
    /// `pos + w_neg·neg`.
    pub total: f64,
    /// Gradient of `total`.
    pub grad: Vec<f64>,
    /// Masks that passed the size filter.
    pub masks: usize,
}

/// Contrastive instance loss for one view: pull each pixel toward its mask
/// representative, push distinct representatives at least `gamma` apart in
/// squared distance (ordered pairs).
pub fn instance_loss(map: &FeatureMap, mask: &[u32], weights: &LossWeights) -> Result<InstanceLoss> {
    if mask.len() != map.pixel_count() {
        return Err(Error::Shape(format!(
            "mask has {} pixels, feature map {}",
            mask.len(),
            map.pixel_count()
        )));
    }
    let dim = map.dim;
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (p, &l) in mask.iter().enumerate() {
        if l != 0 {
            groups.entry(l).or_default().push(p);
        }
    }
    let groups: Vec<Vec<usize>> = groups.into_values().filter(|g| g.len() >= MIN_MASK_PIXELS).collect();
    let reps: Vec<Vec<f64>> = groups.iter().map(|g| representative(map, g).expect("nonempty")).collect();
    let mut grad = vec![0.0; map.data.len()];

    let mut pos = 0.0;
    for (g, r) in groups.iter().zip(&reps) {
        let inv = 1.0 / g.len() as f64;
        let mut resid_sum = vec![0.0; dim];
        for &p in g {
            let x = map.pixel(p);
            for k in 0..dim {
                let d = x[k] - r[k];
                pos += inv * d * d;
                grad[p * dim + k] += 2.0 * inv * d;
                resid_sum[k] += d;
            }
        }
        if !weights.stop_grad_representatives {
            // residuals about the mean sum to zero, so this term is zero up to rounding
            for &p in g {
                for k in 0..dim {
                    grad[p * dim + k] -= 2.0 * inv * inv * resid_sum[k];
                }
            }
        }
    }

    let mut neg = 0.0;
    let mut rep_grad = vec![vec![0.0; dim]; reps.len()];
    for a in 0..reps.len() {
        for b in 0..reps.len() {
            if a == b {
                continue;
            }
            let d2: f64 = reps[a].iter().zip(&reps[b]).map(|(x, y)| (x - y).powi(2)).sum();
            if d2 < weights.gamma {
                neg += weights.gamma - d2;
                for k in 0..dim {
                    let d = reps[a][k] - reps[b][k];
                    rep_grad[a][k] -= 2.0 * d;
                    rep_grad[b][k] += 2.0 * d;
                }
            }
        }
    }
    for (g, rg) in groups.iter().zip(&rep_grad) {
        let inv = weights.w_neg / g.len() as f64;
        for &p in g {
            for k in 0..dim {
                grad[p * dim + k] += inv * rg[k];
            }
        }
    }
    Ok(InstanceLoss {
        pos,
        neg,
        total: pos + weights.w_neg * neg,
        grad,
        masks: groups.len(),
    })
}

/// Huber loss averaged over pixels whose target is nonzero.
pub fn reg_loss(rendered: &FeatureMap, target: &FeatureMap, delta: f64) -> Result<MapLoss> {
    check_shape(rendered, target, "reg loss")?;
    let dim = rendered.dim;
    let mut grad = vec![0.0; rendered.data.len()];
    let mut total = 0.0;
    let mut pixels = Vec::new();
    for p in 0..rendered.pixel_count() {
        let t = target.pixel(p);
        if t.iter().all(|&v| v == 0.0) {
            continue;
        }
        let r: Vec<f64> = rendered.pixel(p).iter().zip(t).map(|(a, b)| a - b).collect();
        let n = norm(&r);
        total += huber(n, delta);
        let f = huber_factor(n, delta);
        for k in 0..dim {
            grad[p * dim + k] = f * r[k];
        }
        pixels.push(p);
    }
    if !pixels.is_empty() {
        let inv = 1.0 / pixels.len() as f64;
        total *= inv;
        for &p in &pixels {
            grad[p * dim..(p + 1) * dim].iter_mut().for_each(|g| *g *= inv);
        }
    }
    Ok(MapLoss { value: total, grad })
}

/// Per-term loss values as logged each step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub rgb: f64,
    pub clip: f64,
    pub pos: f64,
    pub neg: f64,
    pub reg: f64,
}

impl LossParts {
    pub fn instance(&self, w_neg: f64) -> f64 {
        self.pos + w_neg * self.neg
    }
}

/// `rgb + λ_lang·clip + λ_inst·(pos + w_neg·neg) + λ_reg·reg`; the first
/// non-finite term aborts with its name.
pub fn total_loss(parts: &LossParts, weights: &LossWeights, step: usize) -> Result<f64> {
    let named = [
        ("rgb", parts.rgb),
        ("clip", parts.clip),
        ("pos", parts.pos),
        ("neg", parts.neg),
        ("reg", parts.reg),
    ];
    if let Some((term, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            step,
            term: term.to_string(),
        });
    }
    Ok(parts.rgb
        + weights.lambda_lang * parts.clip
        + weights.lambda_inst * parts.instance(weights.w_neg)
        + weights.lambda_reg * parts.reg)
}
