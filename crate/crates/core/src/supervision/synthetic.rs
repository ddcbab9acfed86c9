//! Seeded synthetic scenes: blob objects above a floor, a few floaters, a
//! ring of cameras, and supervision rendered from the ground truth.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::targets::{build_language_targets, build_reg_targets};
use super::{ConceptTable, SupervisionSet, ViewSupervision};
use crate::error::{Error, Result};
use crate::raster::{Attributes, FeatureMap, Frame, RenderOptions};
use crate::scene::{logit, Camera, GaussianPrimitive, GaussianScene};

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub objects: usize,
    pub concepts: usize,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub splats_per_object: (usize, usize),
    /// Target primitive count; the floor receives whatever objects and floaters leave.
    pub total_splats: usize,
    pub clutter_splats: usize,
    /// Object spread (standard deviation of member centers), scene units.
    pub object_sigma: (f64, f64),
    pub layout_radius: f64,
    pub camera_radius: f64,
    pub focal: f64,
    pub d_clip: usize,
    pub d_reg: usize,
    pub scale_levels: usize,
    pub base_window: usize,
    pub reg_noise: f64,
    pub max_concept_cosine: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            objects: 8,
            concepts: 4,
            views: 24,
            width: 64,
            height: 64,
            splats_per_object: (30, 200),
            total_splats: 2500,
            clutter_splats: 70,
            object_sigma: (0.13, 0.24),
            layout_radius: 2.4,
            camera_radius: 5.5,
            focal: 64.0,
            d_clip: 32,
            d_reg: 16,
            scale_levels: 3,
            base_window: 8,
            reg_noise: 0.05,
            max_concept_cosine: 0.3,
        }
    }
}

impl SceneSpec {
    /// `default` (the benchmark scene), `small` and `tiny` (for quick checks).
    pub fn named(name: &str) -> Result<Self> {
        let d = Self::default();
        match name {
            "default" => Ok(d),
            "small" => Ok(Self {
                objects: 4,
                concepts: 2,
                views: 8,
                width: 32,
                height: 32,
                splats_per_object: (30, 60),
                total_splats: 700,
                clutter_splats: 20,
                focal: 32.0,
                ..d
            }),
            "tiny" => Ok(Self {
                objects: 2,
                concepts: 2,
                views: 4,
                width: 24,
                height: 24,
                splats_per_object: (30, 40),
                total_splats: 250,
                clutter_splats: 5,
                layout_radius: 1.2,
                focal: 24.0,
                ..d
            }),
            other => Err(Error::Config(format!("unknown scene spec {other:?} (default, small, tiny)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.splats_per_object;
        if self.objects > 0 && (lo == 0 || lo > hi) {
            return Err(Error::Config(format!("invalid splats_per_object range {lo}..{hi}")));
        }
        if self.objects > 0 && self.concepts == 0 {
            return Err(Error::Config("objects need at least one concept".into()));
        }
        if self.objects * lo + self.clutter_splats > self.total_splats {
            return Err(Error::Config(format!(
                "{} objects of at least {lo} splats plus {} floaters exceed the {}-splat budget",
                self.objects, self.clutter_splats, self.total_splats
            )));
        }
        if self.views == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Config("views and resolution must be positive".into()));
        }
        if self.scale_levels == 0 || self.d_clip == 0 {
            return Err(Error::Config("scale_levels and d_clip must be positive".into()));
        }
        if !(self.object_sigma.0 > 0.0 && self.object_sigma.0 <= self.object_sigma.1) {
            return Err(Error::Config("invalid object_sigma range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub spec: SceneSpec,
    /// Ground truth with per-primitive instance labels (0 = floor or floater) and concepts.
    pub gt_scene: GaussianScene,
    /// Training start: the ground truth with jittered geometry and reset appearance.
    pub init_scene: GaussianScene,
    pub concepts: ConceptTable,
    pub supervision: SupervisionSet,
}

fn round_f32(map: &mut FeatureMap) {
    for v in &mut map.data {
        *v = *v as f32 as f64;
    }
}

fn random_quaternion(rng: &mut ChaCha8Rng) -> Vector4<f64> {
    let q: Vector4<f64> = Vector4::from_fn(|_, _| StandardNormal.sample(rng));
    let n = q.norm();
    if n > 0.0 { q / n } else { Vector4::new(1.0, 0.0, 0.0, 0.0) }
}

fn normal3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::from_fn(|_, _| StandardNormal.sample(rng))
}

struct Blob {
    center: Vector3<f64>,
    sigma: f64,
    concept: usize,
    splats: usize,
}

fn place_objects(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Blob>> {
    for _restart in 0..200 {
        let mut blobs: Vec<Blob> = Vec::with_capacity(spec.objects);
        let mut ok = true;
        for k in 0..spec.objects {
            let sigma = rng.random_range(spec.object_sigma.0..=spec.object_sigma.1);
            let concept = k % spec.concepts.max(1);
            let splats = rng.random_range(spec.splats_per_object.0..=spec.splats_per_object.1);
            let mut placed = None;
            for _ in 0..2000 {
                let r = spec.layout_radius * rng.random::<f64>().sqrt();
                let t = rng.random_range(0.0..2.0 * PI);
                let c = Vector3::new(r * t.cos(), rng.random_range(-0.15..0.35), r * t.sin());
                let clear = blobs.iter().all(|b| {
                    let d = (b.center - c).norm();
                    let need = if b.concept == concept { 3.5 * (b.sigma + sigma) + 0.5 } else { 2.6 * (b.sigma + sigma) };
                    d >= need
                });
                if clear {
                    placed = Some(c);
                    break;
                }
            }
            match placed {
                Some(center) => blobs.push(Blob { center, sigma, concept, splats }),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Ok(blobs);
        }
    }
    Err(Error::Config(format!(
        "cannot place {} disjoint objects within radius {}",
        spec.objects, spec.layout_radius
    )))
}

fn build_scene(spec: &SceneSpec, blobs: &[Blob], rng: &mut ChaCha8Rng) -> Result<GaussianScene> {
    let mut prims = Vec::new();
    let mut labels = Vec::new();
    let mut concepts = Vec::new();
    for (k, b) in blobs.iter().enumerate() {
        let axes = Vector3::from_fn(|_, _| rng.random_range(0.7..1.3));
        let frame = crate::scene::rotation_from_unit_quaternion(&random_quaternion(rng));
        let base: Vector3<f64> = Vector3::from_fn(|_, _| rng.random_range(0.15..0.95));
        for _ in 0..b.splats {
            let mut z = normal3(rng);
            while z.norm() > 2.5 {
                z = normal3(rng);
            }
            let offset: Vector3<f64> = frame * z.component_mul(&axes) * b.sigma;
            let color = (base + normal3(rng) * 0.04).map(|v| v.clamp(0.0, 1.0));
            prims.push(GaussianPrimitive {
                position: b.center + offset,
                rotation: random_quaternion(rng),
                log_scale: Vector3::from_fn(|_, _| (b.sigma * rng.random_range(0.22..0.42)).ln()),
                opacity_logit: logit(rng.random_range(0.75..0.95)),
                color,
            });
            labels.push(k as i64 + 1);
            concepts.push(b.concept as i64);
        }
    }

    let floor_y = blobs
        .iter()
        .map(|b| b.center.y - 3.0 * b.sigma)
        .fold(-0.4f64, f64::min)
        - 0.3;
    let object_splats: usize = blobs.iter().map(|b| b.splats).sum();
    let floor_count = spec.total_splats - object_splats - spec.clutter_splats;
    let floor_radius = spec.layout_radius + 2.0;
    let spacing = (PI * floor_radius * floor_radius / floor_count.max(1) as f64).sqrt();
    let golden = PI * (3.0 - 5f64.sqrt());
    for i in 0..floor_count {
        let r = floor_radius * ((i as f64 + 0.5) / floor_count as f64).sqrt();
        let t = i as f64 * golden;
        let pos = Vector3::new(
            r * t.cos() + rng.random_range(-0.15..0.15) * spacing,
            floor_y + rng.random_range(-0.01..0.01),
            r * t.sin() + rng.random_range(-0.15..0.15) * spacing,
        );
        let checker = ((pos.x.floor() + pos.z.floor()) as i64).rem_euclid(2) as f64;
        let shade = 0.3 + 0.2 * checker + rng.random_range(-0.03..0.03);
        let yaw = rng.random_range(0.0..PI);
        prims.push(GaussianPrimitive {
            position: pos,
            rotation: Vector4::new((yaw / 2.0).cos(), 0.0, (yaw / 2.0).sin(), 0.0),
            log_scale: Vector3::new((0.6 * spacing).ln(), 0.02f64.ln(), (0.6 * spacing).ln()),
            opacity_logit: logit(0.9),
            color: Vector3::new(shade, shade * 0.95, shade * 0.85),
        });
        labels.push(0);
        concepts.push(-1);
    }

    let mut floaters = 0;
    let mut attempts = 0;
    while floaters < spec.clutter_splats {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Config("cannot place floaters outside the objects".into()));
        }
        let r = (spec.layout_radius + 0.6) * rng.random::<f64>().sqrt();
        let t = rng.random_range(0.0..2.0 * PI);
        let pos = Vector3::new(r * t.cos(), rng.random_range(floor_y + 0.3..1.0), r * t.sin());
        if blobs.iter().any(|b| (b.center - pos).norm() < 3.2 * b.sigma) {
            continue;
        }
        prims.push(GaussianPrimitive {
            position: pos,
            rotation: random_quaternion(rng),
            log_scale: Vector3::from_fn(|_, _| rng.random_range(0.04f64..0.09).ln()),
            opacity_logit: logit(rng.random_range(0.5..0.85)),
            color: Vector3::from_fn(|_, _| rng.random_range(0.0..1.0)),
        });
        labels.push(0);
        concepts.push(-1);
        floaters += 1;
    }

    let mut scene = GaussianScene::new(prims);
    scene.gt_instance_label = Some(labels);
    scene.gt_concept_id = Some(concepts);
    Ok(scene)
}

/// Two elevation rings around the layout, alternating between them.
fn ring_cameras(spec: &SceneSpec) -> Result<Vec<Camera>> {
    let target = Vector3::new(0.0, -0.1, 0.0);
    (0..spec.views)
        .map(|v| {
            let (elev, az) = if v % 2 == 0 {
                (22f64.to_radians(), 2.0 * PI * v as f64 / spec.views as f64)
            } else {
                (38f64.to_radians(), 2.0 * PI * v as f64 / spec.views as f64 + PI / spec.views as f64)
            };
            let r = spec.camera_radius;
            let eye = Vector3::new(r * elev.cos() * az.cos(), r * elev.sin(), r * elev.cos() * az.sin());
            Camera::look_at(eye, target, Vector3::new(0.0, 1.0, 0.0), spec.focal, spec.width, spec.height)
        })
        .collect()
}

/// Per-pixel argmax over `[non-object, object 1, …, object K]` indicator
/// renders where accumulated alpha exceeds 0.5; argmax 0 means background.
pub(crate) fn render_masks(scene: &GaussianScene, cam: &Camera, objects: usize) -> Result<Vec<u32>> {
    let labels = scene
        .gt_instance_label
        .as_ref()
        .ok_or_else(|| Error::Config("mask rendering needs ground-truth labels".into()))?;
    let dim = objects + 1;
    let mut ind = vec![0.0; scene.len() * dim];
    for (i, &l) in labels.iter().enumerate() {
        let ch = if l > 0 && (l as usize) <= objects { l as usize } else { 0 };
        ind[i * dim + ch] = 1.0;
    }
    let map = Frame::new(scene, cam, RenderOptions::default()).render(Attributes::Features { dim, values: &ind })?;
    Ok((0..map.pixel_count())
        .map(|p| {
            if map.accumulated_alpha[p] <= 0.5 {
                return 0;
            }
            let px = map.pixel(p);
            let mut best = 0;
            for k in 1..dim {
                if px[k] > px[best] {
                    best = k;
                }
            }
            best as u32
        })
        .collect())
}

pub fn generate_synthetic(spec: &SceneSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let concepts = ConceptTable::random(spec.concepts, spec.d_clip, spec.max_concept_cosine, &mut rng)?;
    let blobs = place_objects(spec, &mut rng)?;
    let gt_scene = build_scene(spec, &blobs, &mut rng)?;
    let cameras = ring_cameras(spec)?;

    let mut views = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let mask = render_masks(&gt_scene, cam, spec.objects)?;
        let mask_concept: BTreeMap<u32, usize> = mask
            .iter()
            .filter(|&&l| l != 0)
            .map(|&l| (l, blobs[l as usize - 1].concept))
            .collect();
        let mut rgb = Frame::new(&gt_scene, cam, RenderOptions::default()).render(Attributes::Color)?;
        round_f32(&mut rgb);
        let mut language = build_language_targets(
            &mask,
            spec.width,
            spec.height,
            &mask_concept,
            &concepts,
            spec.scale_levels,
            spec.base_window,
        );
        language.iter_mut().for_each(round_f32);
        views.push(ViewSupervision {
            mask,
            mask_concept,
            rgb,
            language,
            reg: FeatureMap::zeros(spec.width, spec.height, spec.d_reg),
        });
    }
    let masks: Vec<&[u32]> = views.iter().map(|v| v.mask.as_slice()).collect();
    let regs = build_reg_targets(&masks, spec.width, spec.height, spec.d_reg, spec.reg_noise, seed ^ 0x5eed_0f_7e61);
    for (view, mut reg) in views.iter_mut().zip(regs) {
        round_f32(&mut reg);
        view.reg = reg;
    }

    let mut init_scene = gt_scene.clone();
    for p in &mut init_scene.primitives {
        p.position += normal3(&mut rng) * 0.03;
        p.log_scale += Vector3::repeat(0.25);
        p.opacity_logit = 0.0;
        p.color = Vector3::repeat(0.5);
    }

    let supervision = SupervisionSet {
        width: spec.width,
        height: spec.height,
        cameras,
        views,
    };
    supervision.validate()?;
    Ok(SyntheticData {
        spec: spec.clone(),
        gt_scene,
        init_scene,
        concepts,
        supervision,
    })
}
