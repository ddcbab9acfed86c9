use std::borrow::Cow;
use std::hash::{Hash, Hasher};

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use super::project::{backward_projection, project_full, Projected};
use super::{Attributes, BackwardRequest, FeatureMap, PrimitiveGradient, RenderGradients, RenderOptions, Splat2D};
use crate::error::{Error, Result};
use crate::scene::{Camera, GaussianScene};

/// Rows per work unit. Fixed so that reductions do not depend on the worker count.
const ROWS_PER_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug)]
struct Entry {
    slot: u32,
    alpha_raw: f64,
}

/// One view's projected splats and per-pixel contributor lists.
pub struct Frame<'a> {
    scene: &'a GaussianScene,
    camera: &'a Camera,
    opts: RenderOptions,
    /// Sorted by `(depth, primitive_index)`.
    splats: Vec<Projected>,
    /// CSR offsets into `entries`, one range per pixel.
    offsets: Vec<usize>,
    entries: Vec<Entry>,
}

#[inline]
fn offset_and_mahalanobis(s: &Projected, row: usize, col: usize) -> (f64, f64, f64) {
    let dx = col as f64 - s.splat.mean2d.x;
    let dy = row as f64 - s.splat.mean2d.y;
    let m = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
    (dx, dy, m)
}

impl<'a> Frame<'a> {
    pub fn new(scene: &'a GaussianScene, camera: &'a Camera, opts: RenderOptions) -> Self {
        let mut splats: Vec<Projected> = scene
            .primitives
            .iter()
            .enumerate()
            .filter_map(|(i, p)| project_full(p, i, camera, &opts))
            .collect();
        splats.sort_by(|a, b| {
            a.splat
                .depth
                .total_cmp(&b.splat.depth)
                .then(a.splat.primitive_index.cmp(&b.splat.primitive_index))
        });

        let width = camera.width;
        let n_pixels = camera.pixel_count();
        let mut hits: Vec<(u32, Entry)> = Vec::new();
        for (slot, s) in splats.iter().enumerate() {
            let Some((r0, r1, c0, c1)) = s.bbox else { continue };
            for row in r0..=r1 {
                for col in c0..=c1 {
                    let (_, _, m) = offset_and_mahalanobis(s, row, col);
                    let alpha_raw = s.opacity * (-0.5 * m).exp();
                    if alpha_raw.min(opts.alpha_cap) >= opts.alpha_floor {
                        hits.push((
                            (row * width + col) as u32,
                            Entry {
                                slot: slot as u32,
                                alpha_raw,
                            },
                        ));
                    }
                }
            }
        }
        // stable counting sort by pixel keeps each list in depth order
        let mut offsets = vec![0usize; n_pixels + 1];
        for (p, _) in &hits {
            offsets[*p as usize + 1] += 1;
        }
        for p in 0..n_pixels {
            offsets[p + 1] += offsets[p];
        }
        let mut cursor = offsets.clone();
        let mut entries = vec![
            Entry {
                slot: 0,
                alpha_raw: 0.0
            };
            hits.len()
        ];
        for (p, e) in hits {
            let c = &mut cursor[p as usize];
            entries[*c] = e;
            *c += 1;
        }

        Self {
            scene,
            camera,
            opts,
            splats,
            offsets,
            entries,
        }
    }

    pub fn camera(&self) -> &Camera {
        self.camera
    }

    /// Splats that survived culling, in blending order.
    pub fn splats(&self) -> impl Iterator<Item = &Splat2D> {
        self.splats.iter().map(|p| &p.splat)
    }

    /// Per primitive: does it contribute to at least one pixel?
    pub fn contributing_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.scene.len()];
        for e in &self.entries {
            mask[self.splats[e.slot as usize].splat.primitive_index] = true;
        }
        mask
    }

    /// Number of (pixel, splat) blending pairs.
    pub fn contribution_count(&self) -> usize {
        self.entries.len()
    }

    /// Hash of which splats contribute to which pixels, in which order, and
    /// which hit the alpha cap. Two parameter settings with the same
    /// signature lie in the same smooth piece of the rendering function.
    #[doc(hidden)]
    pub fn signature(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in 0..self.camera.pixel_count() {
            p.hash(&mut h);
            for e in &self.entries[self.offsets[p]..self.offsets[p + 1]] {
                self.splats[e.slot as usize].splat.primitive_index.hash(&mut h);
                (e.alpha_raw > self.opts.alpha_cap).hash(&mut h);
            }
        }
        h.finish()
    }

    fn attribute_table<'t>(&self, attributes: &Attributes<'t>) -> Result<Cow<'t, [f64]>> {
        attributes.validate(self.scene.len())?;
        Ok(match attributes {
            Attributes::Color => Cow::Owned(
                self.scene
                    .primitives
                    .iter()
                    .flat_map(|p| p.color.iter().copied())
                    .collect(),
            ),
            Attributes::Features { values, .. } => Cow::Borrowed(values),
        })
    }

    pub fn render(&self, attributes: Attributes) -> Result<FeatureMap> {
        let table = self.attribute_table(&attributes)?;
        let dim = attributes.dim();
        let (width, height) = (self.camera.width, self.camera.height);
        let mut out = FeatureMap::zeros(width, height, dim);
        let cap = self.opts.alpha_cap;
        let chunk_px = ROWS_PER_CHUNK * width;
        out.data
            .par_chunks_mut(chunk_px * dim.max(1))
            .zip(out.accumulated_alpha.par_chunks_mut(chunk_px))
            .enumerate()
            .for_each(|(chunk, (data, acc))| {
                let first = chunk * chunk_px;
                for (local, acc_px) in acc.iter_mut().enumerate() {
                    let p = first + local;
                    let px = &mut data[local * dim..(local + 1) * dim];
                    let mut transmittance = 1.0;
                    let mut total = 0.0;
                    for e in &self.entries[self.offsets[p]..self.offsets[p + 1]] {
                        let alpha = e.alpha_raw.min(cap);
                        let w = alpha * transmittance;
                        let prim = self.splats[e.slot as usize].splat.primitive_index;
                        let f = &table[prim * dim..(prim + 1) * dim];
                        for (o, v) in px.iter_mut().zip(f) {
                            *o += w * v;
                        }
                        total += w;
                        transmittance *= 1.0 - alpha;
                    }
                    *acc_px = total;
                }
            });
        Ok(out)
    }

    /// Reverse-mode pass for a loss whose gradient w.r.t. the rendered map is
    /// `output_gradient` (and optionally w.r.t. the accumulated alpha).
    pub fn backward(
        &self,
        attributes: Attributes,
        output_gradient: &[f64],
        alpha_gradient: Option<&[f64]>,
        request: &BackwardRequest,
    ) -> Result<RenderGradients> {
        let table = self.attribute_table(&attributes)?;
        let dim = attributes.dim();
        let n_pixels = self.camera.pixel_count();
        if output_gradient.len() != n_pixels * dim {
            return Err(Error::Dimension(format!(
                "output gradient has {} values, expected {n_pixels} pixels × {dim}",
                output_gradient.len()
            )));
        }
        if let Some(ga) = alpha_gradient {
            if ga.len() != n_pixels {
                return Err(Error::Dimension("alpha gradient must have one value per pixel".into()));
            }
        }
        let geo = request.geometry_channels.clone();
        if geo.end > dim {
            return Err(Error::Dimension(format!("geometry channels {geo:?} exceed dim {dim}")));
        }
        let want_geo = !geo.is_empty() || alpha_gradient.is_some();
        let want_attr = request.attributes;
        let n_slots = self.splats.len();
        let cap = self.opts.alpha_cap;
        let width = self.camera.width;
        let n_chunks = self.camera.height.div_ceil(ROWS_PER_CHUNK);

        struct Partial {
            attr: Vec<f64>,
            // d/d mean (2), d/d conic full-matrix (xx, xy, yy), d/d opacity
            geo: Vec<[f64; 6]>,
        }

        let partials: Vec<Partial> = (0..n_chunks)
            .into_par_iter()
            .map(|chunk| {
                let mut part = Partial {
                    attr: if want_attr { vec![0.0; n_slots * dim] } else { Vec::new() },
                    geo: if want_geo { vec![[0.0; 6]; n_slots] } else { Vec::new() },
                };
                let mut scratch: Vec<(usize, f64, f64)> = Vec::new();
                let mut suffix = vec![0.0; geo.len()];
                let p0 = chunk * ROWS_PER_CHUNK * width;
                let p1 = ((chunk + 1) * ROWS_PER_CHUNK * width).min(n_pixels);
                for p in p0..p1 {
                    let list = &self.entries[self.offsets[p]..self.offsets[p + 1]];
                    if list.is_empty() {
                        continue;
                    }
                    let g = &output_gradient[p * dim..(p + 1) * dim];
                    let ga = alpha_gradient.map_or(0.0, |a| a[p]);
                    scratch.clear();
                    let mut transmittance = 1.0;
                    for (k, e) in list.iter().enumerate() {
                        let alpha = e.alpha_raw.min(cap);
                        scratch.push((k, alpha, transmittance));
                        transmittance *= 1.0 - alpha;
                    }
                    suffix.iter_mut().for_each(|s| *s = 0.0);
                    let mut suffix_w = 0.0;
                    let (row, col) = (p / width, p % width);
                    for &(k, alpha, t) in scratch.iter().rev() {
                        let e = list[k];
                        let slot = e.slot as usize;
                        let s = &self.splats[slot];
                        let prim = s.splat.primitive_index;
                        let w = alpha * t;
                        if want_attr {
                            let dst = &mut part.attr[slot * dim..(slot + 1) * dim];
                            for (d, gv) in dst.iter_mut().zip(g) {
                                *d += w * gv;
                            }
                        }
                        if !want_geo {
                            continue;
                        }
                        let f = &table[prim * dim..(prim + 1) * dim];
                        let inv_one_minus = 1.0 / (1.0 - alpha);
                        let mut d_alpha = ga * (t - suffix_w * inv_one_minus);
                        let mut dot_gf = 0.0;
                        let mut dot_gs = 0.0;
                        for (j, c) in geo.clone().enumerate() {
                            dot_gf += g[c] * f[c];
                            dot_gs += g[c] * suffix[j];
                            suffix[j] += w * f[c];
                        }
                        d_alpha += t * dot_gf - dot_gs * inv_one_minus;
                        suffix_w += w;
                        if e.alpha_raw > cap {
                            continue;
                        }
                        let (dx, dy, m) = offset_and_mahalanobis(s, row, col);
                        let gauss = (-0.5 * m).exp();
                        let a = d_alpha * e.alpha_raw;
                        let acc = &mut part.geo[slot];
                        // dα/dμ = α A Δ, dα/dA = −½ α Δ Δᵀ
                        acc[0] += a * (s.conic[0] * dx + s.conic[1] * dy);
                        acc[1] += a * (s.conic[1] * dx + s.conic[2] * dy);
                        acc[2] += -0.5 * a * dx * dx;
                        acc[3] += -0.5 * a * dx * dy;
                        acc[4] += -0.5 * a * dy * dy;
                        acc[5] += d_alpha * gauss;
                    }
                }
                part
            })
            .collect();

        let mut attr = if want_attr { vec![0.0; n_slots * dim] } else { Vec::new() };
        let mut geo_acc = if want_geo { vec![[0.0; 6]; n_slots] } else { Vec::new() };
        for part in &partials {
            for (a, b) in attr.iter_mut().zip(&part.attr) {
                *a += b;
            }
            for (a, b) in geo_acc.iter_mut().zip(&part.geo) {
                for k in 0..6 {
                    a[k] += b[k];
                }
            }
        }

        let n = self.scene.len();
        let mut primitives = vec![PrimitiveGradient::default(); n];
        let mut attributes_out = match attributes {
            Attributes::Color => Vec::new(),
            Attributes::Features { .. } => vec![0.0; n * dim],
        };
        let per_slot: Vec<(usize, PrimitiveGradient)> = self
            .splats
            .par_iter()
            .enumerate()
            .map(|(slot, s)| {
                let mut pg = PrimitiveGradient::default();
                if want_geo {
                    let a = geo_acc[slot];
                    let g_conic = Matrix2::new(a[2], a[3], a[3], a[4]);
                    let gg = backward_projection(s, self.camera, Vector2::new(a[0], a[1]), g_conic);
                    pg.position = gg.position;
                    pg.rotation = gg.rotation;
                    pg.log_scale = gg.log_scale;
                    pg.opacity_logit = a[5] * s.opacity * (1.0 - s.opacity);
                }
                (s.splat.primitive_index, pg)
            })
            .collect();
        for (slot, (prim, mut pg)) in per_slot.into_iter().enumerate() {
            if want_attr {
                let src = &attr[slot * dim..(slot + 1) * dim];
                match attributes {
                    Attributes::Color => pg.color = nalgebra::Vector3::new(src[0], src[1], src[2]),
                    Attributes::Features { .. } => {
                        attributes_out[prim * dim..(prim + 1) * dim].copy_from_slice(src)
                    }
                }
            }
            primitives[prim] = pg;
        }

        Ok(RenderGradients {
            attributes: attributes_out,
            dim,
            primitives,
        })
    }
}
