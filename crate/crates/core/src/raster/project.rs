//! Perspective projection of a 3D Gaussian to an image-space splat and the
//! reverse-mode chain rule back to the primitive's parameters.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};

use super::{RenderOptions, Splat2D};
use crate::scene::{rotation_from_unit_quaternion, Camera, GaussianPrimitive};

/// Mahalanobis radius² enclosing 99% of a 2D Gaussian's mass: −2 ln 0.01.
const MASS99_RADIUS2: f64 = 9.210_340_371_976_184;

/// Everything the backward pass needs from the forward projection.
#[derive(Clone, Debug)]
pub(crate) struct Projected {
    pub splat: Splat2D,
    /// Inverse of `cov2d` as `(xx, xy, yy)`.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub point_cam: Vector3<f64>,
    /// `J W`, the linear map from world offsets to pixel offsets.
    pub jw: Matrix2x3<f64>,
    pub sigma: Matrix3<f64>,
    pub rot: Matrix3<f64>,
    pub scale: Vector3<f64>,
    pub unit_q: Vector4<f64>,
    pub q_norm: f64,
    /// Inclusive pixel bounds `(row0, row1, col0, col1)` outside of which α < alpha floor.
    pub bbox: Option<(usize, usize, usize, usize)>,
}

/// Largest eigenvalue of a symmetric 2×2 matrix.
pub(crate) fn max_eigenvalue(c: &Matrix2<f64>) -> f64 {
    let mid = 0.5 * (c[(0, 0)] + c[(1, 1)]);
    let half = 0.5 * (c[(0, 0)] - c[(1, 1)]);
    mid + (half * half + c[(0, 1)] * c[(0, 1)]).sqrt()
}

pub(crate) fn project_full(
    primitive: &GaussianPrimitive,
    index: usize,
    camera: &Camera,
    opts: &RenderOptions,
) -> Option<Projected> {
    let t = camera.world_to_camera(&primitive.position);
    if !(t.z > opts.near) {
        return None;
    }
    let (fx, fy) = (camera.fx, camera.fy);
    let inv_z = 1.0 / t.z;
    let mean = Vector2::new(fx * t.x * inv_z + camera.cx, fy * t.y * inv_z + camera.cy);
    let jac = Matrix2x3::new(
        fx * inv_z,
        0.0,
        -fx * t.x * inv_z * inv_z,
        0.0,
        fy * inv_z,
        -fy * t.y * inv_z * inv_z,
    );
    let jw = jac * camera.rotation;

    let q_norm = primitive.rotation.norm();
    let unit_q = if q_norm > 0.0 {
        primitive.rotation / q_norm
    } else {
        Vector4::new(1.0, 0.0, 0.0, 0.0)
    };
    let rot = rotation_from_unit_quaternion(&unit_q);
    let scale = primitive.log_scale.map(f64::exp);
    let rs = rot * Matrix3::from_diagonal(&scale);
    let sigma = rs * rs.transpose();

    let mut cov = jw * sigma * jw.transpose();
    cov[(0, 1)] = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    cov[(1, 0)] = cov[(0, 1)];
    cov[(0, 0)] += opts.blur;
    cov[(1, 1)] += opts.blur;
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(0, 1)];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let lambda = max_eigenvalue(&cov);
    let r99 = (MASS99_RADIUS2 * lambda).sqrt();
    let (w, h) = (camera.width as f64, camera.height as f64);
    if mean.x + r99 < -0.5 || mean.x - r99 > w - 0.5 || mean.y + r99 < -0.5 || mean.y - r99 > h - 0.5 {
        return None;
    }
    let conic = [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det];
    let opacity = primitive.opacity();

    let bbox = if opts.alpha_floor <= 0.0 {
        Some((0, camera.height - 1, 0, camera.width - 1))
    } else if opacity < opts.alpha_floor {
        None
    } else {
        // outside this radius opacity·exp(−m/2) < floor because m ≥ |Δ|²/λmax
        let r = (2.0 * (opacity / opts.alpha_floor).ln() * lambda).sqrt();
        let clamp_range = |lo: f64, hi: f64, n: usize| -> Option<(usize, usize)> {
            let lo = lo.ceil().max(0.0);
            let hi = hi.floor().min(n as f64 - 1.0);
            (lo <= hi).then_some((lo as usize, hi as usize))
        };
        match (
            clamp_range(mean.y - r, mean.y + r, camera.height),
            clamp_range(mean.x - r, mean.x + r, camera.width),
        ) {
            (Some((r0, r1)), Some((c0, c1))) => Some((r0, r1, c0, c1)),
            _ => None,
        }
    };

    Some(Projected {
        splat: Splat2D {
            mean2d: mean,
            cov2d: cov,
            depth: t.z,
            primitive_index: index,
        },
        conic,
        opacity,
        point_cam: t,
        jw,
        sigma,
        rot,
        scale,
        unit_q,
        q_norm,
        bbox,
    })
}

/// Gradients of a scalar loss w.r.t. the geometric parameters of one primitive.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub(crate) struct GeometryGrad {
    pub position: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub log_scale: Vector3<f64>,
}

/// Partial derivatives of the rotation matrix w.r.t. each unit-quaternion component.
fn rotation_partials(q: &Vector4<f64>) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = 2.0;
    [
        Matrix3::new(0.0, -two * z, two * y, two * z, 0.0, -two * x, -two * y, two * x, 0.0),
        Matrix3::new(0.0, two * y, two * z, two * y, -4.0 * x, -two * w, two * z, two * w, -4.0 * x),
        Matrix3::new(-4.0 * y, two * x, two * w, two * x, 0.0, two * z, -two * w, two * z, -4.0 * y),
        Matrix3::new(-4.0 * z, -two * w, two * x, two * w, -4.0 * z, two * y, two * x, two * y, 0.0),
    ]
}

/// Chain rule from image-space gradients (`g_mean` on the 2D mean, `g_conic`
/// on the full 2×2 inverse covariance) back to position, rotation and log-scale.
pub(crate) fn backward_projection(
    p: &Projected,
    camera: &Camera,
    g_mean: Vector2<f64>,
    g_conic: Matrix2<f64>,
) -> GeometryGrad {
    let a = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
    let g_cov = -(a * g_conic * a);
    let g_sigma = p.jw.transpose() * g_cov * p.jw;
    let g_jw = 2.0 * g_cov * p.jw * p.sigma;
    let g_j = g_jw * camera.rotation.transpose();

    let (fx, fy) = (camera.fx, camera.fy);
    let t = p.point_cam;
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut g_t = Vector3::new(
        g_mean.x * fx * iz,
        g_mean.y * fy * iz,
        -g_mean.x * fx * t.x * iz2 - g_mean.y * fy * t.y * iz2,
    );
    g_t.z += -g_j[(0, 0)] * fx * iz2 - g_j[(1, 1)] * fy * iz2;
    g_t.x += -g_j[(0, 2)] * fx * iz2;
    g_t.z += g_j[(0, 2)] * 2.0 * fx * t.x * iz3;
    g_t.y += -g_j[(1, 2)] * fy * iz2;
    g_t.z += g_j[(1, 2)] * 2.0 * fy * t.y * iz3;
    let position = camera.rotation.transpose() * g_t;

    let rs = p.rot * Matrix3::from_diagonal(&p.scale);
    let g_rs = 2.0 * g_sigma * rs;
    let mut g_rot = g_rs;
    let mut log_scale = Vector3::zeros();
    for b in 0..3 {
        let mut g_sb = 0.0;
        for r in 0..3 {
            g_rot[(r, b)] = g_rs[(r, b)] * p.scale[b];
            g_sb += g_rs[(r, b)] * p.rot[(r, b)];
        }
        log_scale[b] = g_sb * p.scale[b];
    }
    let partials = rotation_partials(&p.unit_q);
    let g_unit = Vector4::from_fn(|k, _| g_rot.component_mul(&partials[k]).sum());
    let rotation = if p.q_norm > 0.0 {
        (g_unit - p.unit_q * p.unit_q.dot(&g_unit)) / p.q_norm
    } else {
        Vector4::zeros()
    };

    GeometryGrad {
        position,
        rotation,
        log_scale,
    }
}
