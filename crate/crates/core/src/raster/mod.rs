//! Differentiable splatting of per-primitive attributes (color or arbitrary
//! feature vectors) into a camera view by front-to-back alpha blending.
//!
//! Per-pixel contributor lists are built per view in [`Frame`]; splats are
//! ordered by camera depth with the primitive index breaking ties. A splat
//! only enters a pixel's list where its effective opacity reaches the alpha
//! floor, so the result equals naive all-splats-per-pixel blending.

mod frame;
pub mod image;
mod project;

use nalgebra::{Matrix2, Vector2, Vector3, Vector4};

pub use frame::Frame;

use crate::error::{Error, Result};
use crate::scene::{Camera, GaussianScene};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    /// Primitives at camera depth ≤ `near` are culled.
    pub near: f64,
    /// Added to both diagonal entries of every 2D covariance (pixels²).
    pub blur: f64,
    pub alpha_floor: f64,
    pub alpha_cap: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            near: 0.2,
            blur: 0.3,
            alpha_floor: 1.0 / 255.0,
            alpha_cap: 0.999,
        }
    }
}

/// Image-space footprint of one primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub primitive_index: usize,
}

/// Which per-primitive attribute is blended.
#[derive(Clone, Copy, Debug)]
pub enum Attributes<'a> {
    Color,
    /// Row-major `n_primitives × dim` values.
    Features { dim: usize, values: &'a [f64] },
}

impl Attributes<'_> {
    pub fn dim(&self) -> usize {
        match self {
            Attributes::Color => 3,
            Attributes::Features { dim, .. } => *dim,
        }
    }

    pub(crate) fn validate(&self, n: usize) -> Result<()> {
        if let Attributes::Features { dim, values } = self {
            if values.len() != n * dim {
                return Err(Error::Dimension(format!(
                    "attribute table has {} values, expected {n} primitives × {dim}",
                    values.len()
                )));
            }
        }
        Ok(())
    }
}

/// Flattens per-primitive feature rows; every row must have the same length.
pub fn flatten_rows(rows: &[Vec<f64>]) -> Result<(usize, Vec<f64>)> {
    let dim = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
        return Err(Error::Dimension(format!(
            "primitive {i} has a {}-dim attribute, primitive 0 has {dim}",
            r.len()
        )));
    }
    Ok((dim, rows.concat()))
}

/// `height × width × dim` grid plus the per-pixel accumulated alpha.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub accumulated_alpha: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, dim: usize) -> Self {
        Self {
            width,
            height,
            dim,
            data: vec![0.0; width * height * dim],
            accumulated_alpha: vec![0.0; width * height],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }

    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.dim..(p + 1) * self.dim]
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        self.pixel(row * self.width + col)
    }

    /// Copies channels `start..start + dim` into a new map (same alpha).
    pub fn channels(&self, start: usize, dim: usize) -> FeatureMap {
        let mut out = FeatureMap::zeros(self.width, self.height, dim);
        for p in 0..self.pixel_count() {
            out.pixel_mut(p).copy_from_slice(&self.pixel(p)[start..start + dim]);
        }
        out.accumulated_alpha.clone_from(&self.accumulated_alpha);
        out
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.width == other.width && self.height == other.height && self.dim == other.dim
    }
}

/// Loss gradient w.r.t. one primitive's parameters, laid out like the primitive.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PrimitiveGradient {
    pub position: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
}

impl PrimitiveGradient {
    pub fn to_params(&self) -> [f64; crate::scene::PARAMS_PER_PRIMITIVE] {
        let mut p = [0.0; crate::scene::PARAMS_PER_PRIMITIVE];
        p[0..3].copy_from_slice(self.position.as_slice());
        p[3..7].copy_from_slice(self.rotation.as_slice());
        p[7..10].copy_from_slice(self.log_scale.as_slice());
        p[10] = self.opacity_logit;
        p[11..14].copy_from_slice(self.color.as_slice());
        p
    }
}

#[derive(Clone, Debug)]
pub struct RenderGradients {
    /// `n × dim` gradient w.r.t. feature attributes; empty for [`Attributes::Color`].
    pub attributes: Vec<f64>,
    pub dim: usize,
    pub primitives: Vec<PrimitiveGradient>,
}

/// What [`Frame::backward`] should produce.
#[derive(Clone, Debug)]
pub struct BackwardRequest {
    /// Output channels whose gradient flows into geometry (mean, covariance, opacity).
    /// Empty range: geometry gradients are left at zero.
    pub geometry_channels: std::ops::Range<usize>,
    pub attributes: bool,
}

impl BackwardRequest {
    pub fn all(dim: usize) -> Self {
        Self {
            geometry_channels: 0..dim,
            attributes: true,
        }
    }
}

/// Projects one primitive with the default options; `None` means culled.
pub fn project(primitive: &crate::scene::GaussianPrimitive, camera: &Camera) -> Option<Splat2D> {
    project_with(primitive, camera, &RenderOptions::default())
}

pub fn project_with(
    primitive: &crate::scene::GaussianPrimitive,
    camera: &Camera,
    opts: &RenderOptions,
) -> Option<Splat2D> {
    project::project_full(primitive, 0, camera, opts).map(|p| p.splat)
}

pub fn render(scene: &GaussianScene, camera: &Camera, attributes: Attributes) -> Result<FeatureMap> {
    attributes.validate(scene.len())?;
    Frame::new(scene, camera, RenderOptions::default()).render(attributes)
}

/// Gradients of a scalar loss given `output_gradient` (`H × W × D`, same layout as the map).
pub fn render_backward(
    scene: &GaussianScene,
    camera: &Camera,
    attributes: Attributes,
    output_gradient: &[f64],
) -> Result<RenderGradients> {
    attributes.validate(scene.len())?;
    let frame = Frame::new(scene, camera, RenderOptions::default());
    frame.backward(attributes, output_gradient, None, &BackwardRequest::all(attributes.dim()))
}

#[cfg(test)]
mod tests;
