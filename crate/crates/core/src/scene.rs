//! Explicit Gaussian scene data model, pinhole camera, and the text file formats.
//!
//! Every trainable quantity is stored unconstrained: opacity as a logit,
//! per-axis extent as the log of the standard deviation, rotation as a raw
//! (possibly unnormalized) quaternion in `(w, x, y, z)` order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3, Vector4};

use crate::error::{Error, Result};

pub const SCENE_MAGIC: &str = "#splatsense-scene";
pub const CAMERA_MAGIC: &str = "#splatsense-cams";

/// Number of scalar parameters per primitive in [`GaussianPrimitive::to_params`] order.
pub const PARAMS_PER_PRIMITIVE: usize = 14;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn rotation_from_unit_quaternion(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub position: Vector3<f64>,
    /// `(w, x, y, z)`; normalized before use.
    pub rotation: Vector4<f64>,
    /// Log of the per-axis standard deviation.
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    /// Linear RGB.
    pub color: Vector3<f64>,
}

impl GaussianPrimitive {
    pub fn isotropic(position: Vector3<f64>, sigma: f64, opacity: f64, color: Vector3<f64>) -> Self {
        Self {
            position,
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            log_scale: Vector3::repeat(sigma.ln()),
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn unit_rotation(&self) -> Vector4<f64> {
        let n = self.rotation.norm();
        if n > 0.0 {
            self.rotation / n
        } else {
            Vector4::new(1.0, 0.0, 0.0, 0.0)
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_from_unit_quaternion(&self.unit_rotation())
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        assemble_covariance(self)
    }

    /// Flat parameter vector: position, rotation, log_scale, opacity_logit, color.
    pub fn to_params(&self) -> [f64; PARAMS_PER_PRIMITIVE] {
        let mut p = [0.0; PARAMS_PER_PRIMITIVE];
        p[0..3].copy_from_slice(self.position.as_slice());
        p[3..7].copy_from_slice(self.rotation.as_slice());
        p[7..10].copy_from_slice(self.log_scale.as_slice());
        p[10] = self.opacity_logit;
        p[11..14].copy_from_slice(self.color.as_slice());
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        self.position = Vector3::new(p[0], p[1], p[2]);
        self.rotation = Vector4::new(p[3], p[4], p[5], p[6]);
        self.log_scale = Vector3::new(p[7], p[8], p[9]);
        self.opacity_logit = p[10];
        self.color = Vector3::new(p[11], p[12], p[13]);
    }
}

/// Σ = R S Sᵀ Rᵀ with R from the normalized quaternion and S = diag(exp(log_scale)).
pub fn assemble_covariance(primitive: &GaussianPrimitive) -> Matrix3<f64> {
    let r = primitive.rotation_matrix();
    let s = primitive.log_scale.map(f64::exp);
    let m = r * Matrix3::from_diagonal(&s);
    let sigma = m * m.transpose();
    // exact symmetry regardless of rounding in the product
    (sigma + sigma.transpose()) * 0.5
}

/// Pinhole camera with a rigid world-to-camera transform.
///
/// Camera axes follow the x-right, y-down, z-forward convention; pixel
/// `(col, row)` sits at image coordinates `(col, row)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!(
                "camera focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("camera resolution must be at least 1x1".into()));
        }
        let r = &self.rotation;
        let ortho = (r * r.transpose() - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(
                "camera rotation must be orthonormal with determinant +1".into(),
            ));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::Config("look_at: up vector parallel to view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            rotation,
            translation,
            width,
            height,
        )
    }

    pub fn world_to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Ordered primitives plus optional per-primitive ground truth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianScene {
    pub primitives: Vec<GaussianPrimitive>,
    pub gt_instance_label: Option<Vec<i64>>,
    pub gt_concept_id: Option<Vec<i64>>,
}

impl GaussianScene {
    pub fn new(primitives: Vec<GaussianPrimitive>) -> Self {
        Self {
            primitives,
            gt_instance_label: None,
            gt_concept_id: None,
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        for (name, labels) in [
            ("gt_instance_label", &self.gt_instance_label),
            ("gt_concept_id", &self.gt_concept_id),
        ] {
            if let Some(l) = labels {
                if l.len() != n {
                    return Err(Error::Shape(format!(
                        "{name} has {} entries for {n} primitives",
                        l.len()
                    )));
                }
            }
        }
        if self.gt_instance_label.is_some() != self.gt_concept_id.is_some() {
            return Err(Error::Shape(
                "instance labels and concept ids must be both present or both absent".into(),
            ));
        }
        Ok(())
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.primitives.iter().map(|p| p.position).collect()
    }

    /// Axis-aligned bounds of the primitive centers; `None` for an empty scene.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = self.primitives.first()?.position;
        Some(self.primitives.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(&p.position), hi.sup(&p.position))
        }))
    }

    /// Permuted copy: primitive `k` of the result is primitive `order[k]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let pick = |v: &Option<Vec<i64>>| v.as_ref().map(|l| order.iter().map(|&i| l[i]).collect());
        Self {
            primitives: order.iter().map(|&i| self.primitives[i].clone()).collect(),
            gt_instance_label: pick(&self.gt_instance_label),
            gt_concept_id: pick(&self.gt_concept_id),
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Checks `#magic v1 count=N` and returns N.
fn parse_header(path: &Path, line: Option<&str>, magic: &str) -> Result<usize> {
    let line = line.ok_or_else(|| Error::parse(path, 0, "empty file, missing header"))?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some(magic) || parts.next() != Some("v1") {
        return Err(Error::parse(path, 0, format!("malformed header, expected '{magic} v1 count=N'")));
    }
    parts
        .next()
        .and_then(|c| c.strip_prefix("count="))
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::parse(path, 0, "malformed header, missing count=N"))
}

fn parse_numbers(path: &Path, record: usize, line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|tok| {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(path, record, format!("invalid number '{tok}'")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::parse(path, record, format!("non-finite value '{tok}'")))
            }
        })
        .collect()
}

fn data_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().skip(1).filter(|l| !l.trim().is_empty())
}

pub fn save_scene(scene: &GaussianScene, path: &Path) -> Result<()> {
    scene.validate()?;
    let mut out = format!("{SCENE_MAGIC} v1 count={}\n", scene.len());
    for (i, p) in scene.primitives.iter().enumerate() {
        let fields = p.to_params();
        let line: Vec<String> = fields.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        if let (Some(inst), Some(concept)) = (&scene.gt_instance_label, &scene.gt_concept_id) {
            let _ = write!(out, " {} {}", inst[i], concept[i]);
        }
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn load_scene(path: &Path) -> Result<GaussianScene> {
    let text = read_file(path)?;
    let count = parse_header(path, text.lines().next(), SCENE_MAGIC)?;
    let mut primitives = Vec::with_capacity(count);
    let mut inst = Vec::new();
    let mut concept = Vec::new();
    let mut labelled = None;
    for (record, line) in data_lines(&text).enumerate() {
        let values = parse_numbers(path, record, line)?;
        let has_labels = match values.len() {
            PARAMS_PER_PRIMITIVE => false,
            n if n == PARAMS_PER_PRIMITIVE + 2 => true,
            n => {
                return Err(Error::parse(
                    path,
                    record,
                    format!("expected 14 or 16 fields, found {n}"),
                ))
            }
        };
        if *labelled.get_or_insert(has_labels) != has_labels {
            return Err(Error::parse(path, record, "label columns present on some records only"));
        }
        let mut p = GaussianPrimitive::isotropic(Vector3::zeros(), 1.0, 0.5, Vector3::zeros());
        p.set_params(&values[..PARAMS_PER_PRIMITIVE]);
        primitives.push(p);
        if has_labels {
            for (dst, v) in [(&mut inst, values[14]), (&mut concept, values[15])] {
                if v.fract() != 0.0 {
                    return Err(Error::parse(path, record, "label columns must be integers"));
                }
                dst.push(v as i64);
            }
        }
    }
    if primitives.len() != count {
        return Err(Error::parse(
            path,
            primitives.len(),
            format!("header declares {count} records, found {}", primitives.len()),
        ));
    }
    let labelled = labelled.unwrap_or(false);
    Ok(GaussianScene {
        primitives,
        gt_instance_label: labelled.then_some(inst),
        gt_concept_id: labelled.then_some(concept),
    })
}

pub fn save_cameras(cameras: &[Camera], path: &Path) -> Result<()> {
    let mut out = format!("{CAMERA_MAGIC} v1 count={}\n", cameras.len());
    for c in cameras {
        let mut vals = vec![c.fx, c.fy, c.cx, c.cy];
        for r in 0..3 {
            for k in 0..3 {
                vals.push(c.rotation[(r, k)]);
            }
        }
        vals.extend_from_slice(c.translation.as_slice());
        let line: Vec<String> = vals.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{} {} {}", line.join(" "), c.height, c.width);
    }
    write_file(path, &out)
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = read_file(path)?;
    let count = parse_header(path, text.lines().next(), CAMERA_MAGIC)?;
    let mut cameras = Vec::with_capacity(count);
    for (record, line) in data_lines(&text).enumerate() {
        let v = parse_numbers(path, record, line)?;
        if v.len() != 18 {
            return Err(Error::parse(path, record, format!("expected 18 fields, found {}", v.len())));
        }
        let rotation = Matrix3::new(v[4], v[5], v[6], v[7], v[8], v[9], v[10], v[11], v[12]);
        let translation = Vector3::new(v[13], v[14], v[15]);
        let (h, w) = (v[16], v[17]);
        if h.fract() != 0.0 || w.fract() != 0.0 || h < 1.0 || w < 1.0 {
            return Err(Error::parse(path, record, "resolution must be positive integers"));
        }
        let cam = Camera::new(v[0], v[1], v[2], v[3], rotation, translation, w as usize, h as usize)
            .map_err(|e| Error::parse(path, record, e.to_string()))?;
        cameras.push(cam);
    }
    if cameras.len() != count {
        return Err(Error::parse(
            path,
            cameras.len(),
            format!("header declares {count} cameras, found {}", cameras.len()),
        ));
    }
    Ok(cameras)
}
