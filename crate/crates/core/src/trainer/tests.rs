use super::*;
use crate::fields::save_checkpoint;
use crate::supervision::{generate_synthetic, SceneSpec, SyntheticData};

fn tiny() -> SyntheticData {
    generate_synthetic(&SceneSpec::named("tiny").unwrap(), 5).unwrap()
}

fn tiny_fields() -> FieldConfig {
    FieldConfig {
        grid: crate::fields::HashGridConfig {
            levels: 4,
            base_resolution: 8,
            growth: 1.5,
            table_size: 4096,
            feats_per_level: 2,
        },
        hidden: 16,
        ..FieldConfig::default()
    }
}

fn config(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        fields: tiny_fields(),
        seed: 3,
        ..TrainConfig::default()
    }
}

fn run(data: &SyntheticData, c: &TrainConfig) -> TrainOutput {
    let fields = build_fields(c, &data.init_scene).unwrap();
    train(data.init_scene.clone(), fields, &data.supervision, c).unwrap()
}

#[test]
fn default_learning_rates() {
    let c = TrainConfig::default();
    assert_eq!((c.lr_gaussians, c.lr_fields), (0.0025, 0.001));
    assert_eq!(c.iterations, 5000);
    assert_eq!(c.warmup_steps(), 1000);
    assert_eq!(Channels::new(&c.fields).dim(), 60);
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(matches!(config(0).validate(), Err(Error::Config(_))));
    assert!(TrainConfig { lr_fields: 0.0, ..config(3) }.validate().is_err());
    assert!(TrainConfig { warmup_rgb_fraction: 1.0, ..config(3) }.validate().is_err());
    assert!(matches!(ablation_variant(&config(3), "no_such"), Err(Error::Config(_))));
}

#[test]
fn zero_views_is_a_configuration_error() {
    let data = tiny();
    let mut sup = data.supervision.clone();
    sup.views.clear();
    sup.cameras.clear();
    let c = config(2);
    let fields = build_fields(&c, &data.init_scene).unwrap();
    assert!(matches!(train(data.init_scene.clone(), fields, &sup, &c), Err(Error::Config(_))));
}

#[test]
fn one_iteration_updates_parameters_once() {
    let data = tiny();
    let c = config(1);
    let fields = build_fields(&c, &data.init_scene).unwrap();
    let out = train(data.init_scene.clone(), fields.clone(), &data.supervision, &c).unwrap();
    assert_eq!(out.log.len(), 1);
    assert_ne!(out.scene, data.init_scene);
    // warmup rounds down to zero steps, so the fields move too
    assert!(out.fields.buffers().iter().zip(fields.buffers()).any(|(a, b)| a[..] != b[..]));
    // a first Adam step moves each coordinate by at most the learning rate
    for (a, b) in out.scene.primitives.iter().zip(&data.init_scene.primitives) {
        for (x, y) in a.to_params().iter().zip(b.to_params()) {
            assert!((x - y).abs() <= c.lr_gaussians * (1.0 + 1e-12));
        }
    }
}

#[test]
fn warmup_leaves_fields_untouched() {
    let data = tiny();
    let c = TrainConfig { warmup_rgb_fraction: 0.5, ..config(8) };
    let fields = build_fields(&c, &data.init_scene).unwrap();
    let mut snapshots = Vec::new();
    train_with(data.init_scene.clone(), fields.clone(), &data.supervision, &c, |s| {
        snapshots.push(s.fields.buffers().iter().map(|b| b.to_vec()).collect::<Vec<_>>());
        Ok(())
    })
    .unwrap();
    let init: Vec<Vec<f64>> = fields.buffers().iter().map(|b| b.to_vec()).collect();
    for snap in &snapshots[..4] {
        assert_eq!(*snap, init);
    }
    assert_ne!(snapshots[4], init);
}

#[test]
fn warmup_rows_log_only_rgb() {
    let data = tiny();
    let out = run(&data, &TrainConfig { warmup_rgb_fraction: 0.5, ..config(4) });
    for r in &out.log[..2] {
        assert_eq!((r.parts.clip, r.parts.pos, r.parts.neg, r.parts.reg), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(r.total, r.parts.rgb);
    }
    assert!(out.log[2].parts.clip > 0.0);
    let csv = log_csv(&out.log);
    assert!(csv.starts_with("step,rgb,clip,pos,neg,reg,total\n0,"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn no_joint_freezes_geometry_after_warmup() {
    let data = tiny();
    let c = ablation_variant(&TrainConfig { warmup_rgb_fraction: 0.5, ..config(6) }, "no_joint").unwrap();
    let mut scenes = Vec::new();
    train_with(data.init_scene.clone(), build_fields(&c, &data.init_scene).unwrap(), &data.supervision, &c, |s| {
        scenes.push(s.scene.clone());
        Ok(())
    })
    .unwrap();
    assert_ne!(scenes[2], data.init_scene);
    for s in &scenes[3..] {
        assert_eq!(*s, scenes[2]);
    }
}

#[test]
fn no_mhe_checkpoint_has_no_hash_tables() {
    let data = tiny();
    let c = ablation_variant(&config(2), "no_mhe").unwrap();
    let out = run(&data, &c);
    assert!(!out.fields.has_hash_tables());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.ckpt");
    save_checkpoint(&out.fields, &path).unwrap();
    assert!(!crate::fields::load_checkpoint(&path).unwrap().has_hash_tables());
    assert_eq!(ablation_variant(&config(2), "full").unwrap(), config(2));
}

#[test]
fn fixed_seed_gives_identical_logs() {
    let data = tiny();
    let c = TrainConfig { warmup_rgb_fraction: 0.25, ..config(8) };
    let a = run(&data, &c);
    let b = run(&data, &c);
    assert_eq!(log_csv(&a.log), log_csv(&b.log));
    assert_eq!(a.scene, b.scene);
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let d = single.install(|| run(&data, &c));
    assert_eq!(log_csv(&a.log), log_csv(&d.log));
}

#[test]
fn views_per_step_averages_gradients() {
    let data = tiny();
    let c = TrainConfig { views_per_step: 2, ..config(3) };
    let out = run(&data, &c);
    assert_eq!(out.log.len(), 3);
    assert!(out.log.iter().all(|r| r.total.is_finite()));
}

#[test]
fn incompatible_fields_are_rejected() {
    let data = tiny();
    let c = config(1);
    let other = TrainConfig {
        fields: FieldConfig { d_clip: 16, ..tiny_fields() },
        ..config(1)
    };
    let fields = build_fields(&other, &data.init_scene).unwrap();
    assert!(matches!(train(data.init_scene.clone(), fields, &data.supervision, &c), Err(Error::Dimension(_))));
}

/// Total semantic loss of one view and its Gaussian-parameter gradient
/// against central differences. Per-Gaussian codes keep the field values
/// independent of the positions, which receive no gradient through the field.
#[test]
fn semantic_gradient_matches_finite_differences() {
    let data = tiny();
    let c = ablation_variant(
        &TrainConfig {
            geometry_from_semantics: true,
            ..config(1)
        },
        "no_mhe",
    )
    .unwrap();
    let fields = build_fields(&c, &data.init_scene).unwrap();
    let ctx = Context {
        config: &c,
        supervision: &data.supervision,
        channels: Channels::new(&fields.config),
    };
    let view = 1;
    let scene = data.init_scene.clone();
    let base = ctx.semantic_view(&scene, &fields, view, (true, false)).unwrap();
    let grad = base.gaussian_grad.unwrap();
    let eval = |s: &GaussianScene| {
        let o = ctx.semantic_view(s, &fields, view, (false, false)).unwrap();
        total_loss(&o.parts, &c.weights, 0).unwrap()
    };
    let signature = |s: &GaussianScene| Frame::new(s, &data.supervision.cameras[view], c.render).signature();
    let sig0 = signature(&scene);
    let params = flat_params(&scene);
    let h = 1e-6;
    let (mut an, mut fd) = (Vec::new(), Vec::new());
    let mut order: Vec<usize> = (0..params.len()).filter(|&k| grad[k] != 0.0).collect();
    order.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
    for &k in order.iter().take(60) {
        let mut s_plus = scene.clone();
        let mut p = params.clone();
        p[k] += h;
        write_params(&mut s_plus, &p);
        let mut s_minus = scene.clone();
        p[k] -= 2.0 * h;
        write_params(&mut s_minus, &p);
        if signature(&s_plus) != sig0 || signature(&s_minus) != sig0 {
            continue;
        }
        an.push(grad[k]);
        fd.push((eval(&s_plus) - eval(&s_minus)) / (2.0 * h));
    }
    assert!(an.len() >= 30, "too few smooth coordinates: {}", an.len());
    let diff = an.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = an.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(diff <= 1e-4 * norm, "relative error {}", diff / norm);
}

#[test]
fn geometry_follows_rgb_alone_by_default() {
    let data = tiny();
    let c = config(1);
    assert!(!c.geometry_from_semantics);
    let fields = build_fields(&c, &data.init_scene).unwrap();
    let ctx = Context {
        config: &c,
        supervision: &data.supervision,
        channels: Channels::new(&fields.config),
    };
    let semantic = ctx.semantic_view(&data.init_scene, &fields, 2, (true, false)).unwrap();
    let rgb = ctx.rgb_view(&data.init_scene, 2, true).unwrap();
    let (a, b) = (semantic.gaussian_grad.unwrap(), rgb.gaussian_grad.unwrap());
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(scale > 0.0);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-12 * scale, "{x} vs {y}");
    }
}
