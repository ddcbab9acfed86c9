use nalgebra::{Matrix2x3, Vector3, Vector4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::scene::{logit, GaussianPrimitive, PARAMS_PER_PRIMITIVE};

fn front_camera(size: usize, focal: f64) -> Camera {
    Camera::look_at(
        Vector3::new(0.0, 0.0, -4.0),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        focal,
        size,
        size,
    )
    .unwrap()
}

fn random_primitive(rng: &mut ChaCha8Rng) -> GaussianPrimitive {
    GaussianPrimitive {
        position: Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
        rotation: Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0)),
        log_scale: Vector3::from_fn(|_, _| rng.random_range(0.12f64..0.5).ln()),
        opacity_logit: rng.random_range(-1.5..2.5),
        color: Vector3::from_fn(|_, _| rng.random_range(0.0..1.0)),
    }
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> GaussianScene {
    GaussianScene::new((0..n).map(|_| random_primitive(rng)).collect())
}

/// Direct evaluation of the blending sum: every unculled splat tested at every pixel.
fn naive_render(scene: &GaussianScene, cam: &Camera, dim: usize, feats: &[f64]) -> FeatureMap {
    let opts = RenderOptions::default();
    let mut splats: Vec<Splat2D> = scene
        .primitives
        .iter()
        .enumerate()
        .filter_map(|(i, p)| project(p, cam).map(|mut s| {
            s.primitive_index = i;
            s
        }))
        .collect();
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.primitive_index.cmp(&b.primitive_index)));
    let mut out = FeatureMap::zeros(cam.width, cam.height, dim);
    for row in 0..cam.height {
        for col in 0..cam.width {
            let p = row * cam.width + col;
            let mut t = 1.0;
            for s in &splats {
                let inv = s.cov2d.try_inverse().unwrap();
                let d = nalgebra::Vector2::new(col as f64, row as f64) - s.mean2d;
                let op = scene.primitives[s.primitive_index].opacity();
                let a = (op * (-0.5 * (d.transpose() * inv * d)[0]).exp()).min(opts.alpha_cap);
                if a < opts.alpha_floor {
                    continue;
                }
                for c in 0..dim {
                    out.data[p * dim + c] += a * t * feats[s.primitive_index * dim + c];
                }
                out.accumulated_alpha[p] += a * t;
                t *= 1.0 - a;
            }
        }
    }
    out
}

#[test]
fn on_axis_projects_to_principal_point() {
    let cam = front_camera(32, 20.0);
    let p = GaussianPrimitive::isotropic(Vector3::zeros(), 1.0, 0.5, Vector3::zeros());
    let s = project(&p, &cam).unwrap();
    assert!((s.mean2d.x - cam.cx).abs() < 1e-12 && (s.mean2d.y - cam.cy).abs() < 1e-12);
    assert!((s.depth - 4.0).abs() < 1e-12);
}

#[test]
fn behind_camera_is_culled() {
    let cam = front_camera(32, 20.0);
    let behind = GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, -6.0), 0.1, 0.5, Vector3::zeros());
    assert!(project(&behind, &cam).is_none());
    let at_eye = GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, -4.0), 0.1, 0.5, Vector3::zeros());
    assert!(project(&at_eye, &cam).is_none());
}

#[test]
fn far_off_image_is_culled() {
    let cam = front_camera(16, 16.0);
    let p = GaussianPrimitive::isotropic(Vector3::new(30.0, 0.0, 0.0), 0.1, 0.5, Vector3::zeros());
    assert!(project(&p, &cam).is_none());
}

#[test]
fn off_axis_projection_matches_numeric_jacobian() {
    let cam = Camera::look_at(
        Vector3::new(0.3, -0.2, -3.0),
        Vector3::new(0.1, 0.1, 0.0),
        Vector3::new(0.0, -1.0, 0.0),
        50.0,
        64,
        48,
    )
    .unwrap();
    let p = GaussianPrimitive {
        position: Vector3::new(0.7, -0.4, 0.5),
        rotation: Vector4::new(0.9, 0.2, -0.3, 0.1),
        log_scale: Vector3::new(-1.0, -1.5, -0.7),
        opacity_logit: 0.0,
        color: Vector3::zeros(),
    };
    let s = project(&p, &cam).unwrap();
    let pixel = |x: &Vector3<f64>| {
        let t = cam.world_to_camera(x);
        nalgebra::Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy)
    };
    let m = pixel(&p.position);
    assert!((s.mean2d - m).norm() <= 1e-12 * m.norm());
    let h = 1e-6;
    let mut jw = Matrix2x3::zeros();
    for k in 0..3 {
        let mut e = Vector3::zeros();
        e[k] = h;
        let d = (pixel(&(p.position + e)) - pixel(&(p.position - e))) / (2.0 * h);
        jw.set_column(k, &d);
    }
    let oracle = jw * p.covariance() * jw.transpose() + nalgebra::Matrix2::identity() * 0.3;
    let rel = (s.cov2d - oracle).abs().max() / oracle.abs().max();
    assert!(rel < 1e-6, "relative cov2d error {rel}");
}

#[test]
fn single_splat_center_is_capped_alpha() {
    let cam = front_camera(17, 16.0);
    let mut p = GaussianPrimitive::isotropic(Vector3::zeros(), 0.3, 0.5, Vector3::new(0.2, 0.4, 0.6));
    p.opacity_logit = logit(0.999_99);
    // the principal point is (8.5, 8.5); shift so a pixel center lies on the mean
    let cam = Camera { cx: 8.0, cy: 8.0, ..cam };
    let scene = GaussianScene::new(vec![p]);
    let map = render(&scene, &cam, Attributes::Color).unwrap();
    let center = map.at(8, 8);
    for (c, v) in center.iter().zip([0.2, 0.4, 0.6]) {
        assert!((c - 0.999 * v).abs() < 1e-12);
    }
    assert!((map.accumulated_alpha[8 * 17 + 8] - 0.999).abs() < 1e-12);
}

#[test]
fn empty_scene_renders_zeros() {
    let cam = front_camera(8, 8.0);
    let map = render(&GaussianScene::default(), &cam, Attributes::Color).unwrap();
    assert!(map.data.iter().all(|&v| v == 0.0));
    assert!(map.accumulated_alpha.iter().all(|&v| v == 0.0));
}

#[test]
fn two_splats_blend_front_to_back() {
    let cam = Camera {
        cx: 4.0,
        cy: 4.0,
        ..front_camera(9, 8.0)
    };
    let near = GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, -1.0), 0.4, 0.6, Vector3::zeros());
    let far = GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, 1.0), 0.4, 0.7, Vector3::zeros());
    // stored far-first so the sort has to reorder them
    let scene = GaussianScene::new(vec![far, near]);
    let (f_far, f_near) = ([1.0, -2.0], [0.5, 3.0]);
    let feats = [f_far, f_near].concat();
    let map = render(&scene, &cam, Attributes::Features { dim: 2, values: &feats }).unwrap();
    // at the principal point both splats are centered, so α equals opacity
    let (a1, a2) = (0.6, 0.7);
    for c in 0..2 {
        let expected = f_near[c] * a1 + f_far[c] * a2 * (1.0 - a1);
        assert!((map.at(4, 4)[c] - expected).abs() < 1e-12);
    }
    assert!((map.accumulated_alpha[4 * 9 + 4] - (a1 + a2 * (1.0 - a1))).abs() < 1e-12);
}

#[test]
fn matches_naive_all_pairs_blending() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let n = rng.random_range(1..12);
        let scene = random_scene(&mut rng, n);
        let cam = front_camera(16, 16.0);
        let feats: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = render(&scene, &cam, Attributes::Features { dim: 4, values: &feats }).unwrap();
        let slow = naive_render(&scene, &cam, 4, &feats);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in fast.accumulated_alpha.iter().zip(&slow.accumulated_alpha) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn dimension_mismatch_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scene = random_scene(&mut rng, 3);
    let cam = front_camera(8, 8.0);
    let bad = vec![0.0; 5];
    assert!(matches!(
        render(&scene, &cam, Attributes::Features { dim: 2, values: &bad }),
        Err(Error::Dimension(_))
    ));
    assert!(flatten_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
}

fn loss_and_grad(map: &FeatureMap) -> (f64, Vec<f64>) {
    let loss = map.data.iter().map(|v| 0.5 * v * v).sum();
    (loss, map.data.clone())
}

#[test]
fn feature_gradient_of_half_squared_norm() {
    let cam = front_camera(12, 12.0);
    let p = GaussianPrimitive::isotropic(Vector3::new(0.1, -0.2, 0.0), 0.5, 0.8, Vector3::zeros());
    let scene = GaussianScene::new(vec![p]);
    let feats = vec![0.3, -1.2, 0.7];
    let attrs = Attributes::Features { dim: 3, values: &feats };
    let map = render(&scene, &cam, attrs).unwrap();
    let (_, g) = loss_and_grad(&map);
    let grads = render_backward(&scene, &cam, attrs, &g).unwrap();
    // oracle: Σ_p w_p · out_p, with weight w_p = accumulated alpha for one splat
    for c in 0..3 {
        let direct: f64 = (0..map.pixel_count())
            .map(|p| map.accumulated_alpha[p] * map.pixel(p)[c])
            .sum();
        let h = 1e-5;
        let mut fp = feats.clone();
        fp[c] += h;
        let mut fm = feats.clone();
        fm[c] -= h;
        let lp = loss_and_grad(&render(&scene, &cam, Attributes::Features { dim: 3, values: &fp }).unwrap()).0;
        let lm = loss_and_grad(&render(&scene, &cam, Attributes::Features { dim: 3, values: &fm }).unwrap()).0;
        let fd = (lp - lm) / (2.0 * h);
        assert!((grads.attributes[c] - direct).abs() <= 1e-10 * direct.abs());
        assert!((grads.attributes[c] - fd).abs() <= 1e-4 * fd.abs());
    }
}

#[test]
fn zero_output_gradient_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scene = random_scene(&mut rng, 6);
    let cam = front_camera(16, 16.0);
    let g = vec![0.0; 16 * 16 * 3];
    let grads = render_backward(&scene, &cam, Attributes::Color, &g).unwrap();
    for pg in &grads.primitives {
        assert!(pg.to_params().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn vanishing_opacity_gives_vanishing_position_gradient() {
    let cam = front_camera(16, 16.0);
    let mut last = f64::INFINITY;
    for logit_value in [-2.0, -4.0, -5.0] {
        let mut p = GaussianPrimitive::isotropic(Vector3::new(0.2, 0.1, 0.0), 0.4, 0.5, Vector3::new(1.0, 0.5, 0.2));
        p.opacity_logit = logit_value;
        let scene = GaussianScene::new(vec![p]);
        let g = vec![1.0; 16 * 16 * 3];
        let grads = render_backward(&scene, &cam, Attributes::Color, &g).unwrap();
        let n = grads.primitives[0].position.norm();
        assert!(n < last);
        last = n;
    }
    // below the alpha floor the splat contributes nothing at all
    let mut p = GaussianPrimitive::isotropic(Vector3::zeros(), 0.4, 0.5, Vector3::repeat(1.0));
    p.opacity_logit = -30.0;
    let scene = GaussianScene::new(vec![p]);
    let grads = render_backward(&scene, &cam, Attributes::Color, &vec![1.0; 16 * 16 * 3]).unwrap();
    assert_eq!(grads.primitives[0].position, Vector3::zeros());
}

/// Central-difference check of every primitive parameter under a random
/// quadratic loss. Returns the worst per-class relative error.
fn check_geometry_gradients(seed: u64) -> [f64; 5] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=10);
    let scene = random_scene(&mut rng, n);
    let cam = front_camera(16, 16.0);
    let lin: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let quad: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    let loss = |s: &GaussianScene| -> (f64, u64) {
        let frame = Frame::new(s, &cam, RenderOptions::default());
        let map = frame.render(Attributes::Color).unwrap();
        let l = map.data.iter().zip(&lin).zip(&quad).map(|((v, a), b)| a * v + 0.5 * b * v * v).sum();
        (l, frame.signature())
    };
    let frame = Frame::new(&scene, &cam, RenderOptions::default());
    let map = frame.render(Attributes::Color).unwrap();
    let g: Vec<f64> = map.data.iter().zip(&lin).zip(&quad).map(|((v, a), b)| a + b * v).collect();
    let grads = frame.backward(Attributes::Color, &g, None, &BackwardRequest::all(3)).unwrap();
    let sig = frame.signature();

    let classes: [std::ops::Range<usize>; 5] = [0..3, 3..7, 7..10, 10..11, 11..14];
    let mut worst = [0.0f64; 5];
    let h = 1e-5;
    for (ci, range) in classes.iter().enumerate() {
        let (mut an, mut fd) = (Vec::new(), Vec::new());
        for i in 0..n {
            let analytic = grads.primitives[i].to_params();
            for k in range.clone() {
                let mut params = scene.primitives[i].to_params();
                let mut plus = scene.clone();
                params[k] += h;
                plus.primitives[i].set_params(&params);
                let mut minus = scene.clone();
                params[k] -= 2.0 * h;
                minus.primitives[i].set_params(&params);
                let (lp, sp) = loss(&plus);
                let (lm, sm) = loss(&minus);
                if sp != sig || sm != sig {
                    continue;
                }
                an.push(analytic[k]);
                fd.push((lp - lm) / (2.0 * h));
            }
        }
        let diff: f64 = an.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = an.iter().map(|a| a * a).sum::<f64>().sqrt().max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
        worst[ci] = if scale > 0.0 { diff / scale } else { diff };
    }
    worst
}

#[test]
fn primitive_gradients_match_finite_differences() {
    for seed in 0..6 {
        let worst = check_geometry_gradients(seed);
        for (class, err) in ["position", "rotation", "log_scale", "opacity", "color"].iter().zip(worst) {
            assert!(err <= 1e-4, "seed {seed} {class}: relative error {err}");
        }
    }
}

#[test]
fn geometry_gradient_respects_channel_restriction() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scene = random_scene(&mut rng, 5);
    let cam = front_camera(16, 16.0);
    let feats: Vec<f64> = (0..5 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let attrs = Attributes::Features { dim: 4, values: &feats };
    let g: Vec<f64> = (0..16 * 16 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let frame = Frame::new(&scene, &cam, RenderOptions::default());
    let full = frame.backward(attrs, &g, None, &BackwardRequest::all(4)).unwrap();
    let first_two = frame
        .backward(attrs, &g, None, &BackwardRequest { geometry_channels: 0..2, attributes: true })
        .unwrap();
    // zeroing channels 2..4 of the output gradient must give the same geometry gradients
    let mut masked = g.clone();
    for p in 0..256 {
        masked[p * 4 + 2] = 0.0;
        masked[p * 4 + 3] = 0.0;
    }
    let reference = frame.backward(attrs, &masked, None, &BackwardRequest::all(4)).unwrap();
    for (a, b) in first_two.primitives.iter().zip(&reference.primitives) {
        let (a, b) = (a.to_params(), b.to_params());
        for k in 0..11 {
            assert!((a[k] - b[k]).abs() <= 1e-12 * (1.0 + b[k].abs()));
        }
    }
    assert_eq!(first_two.attributes, full.attributes);
}

#[test]
fn alpha_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let scene = random_scene(&mut rng, 6);
    let cam = front_camera(16, 16.0);
    let ga: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |s: &GaussianScene| {
        let m = render(s, &cam, Attributes::Color).unwrap();
        m.accumulated_alpha.iter().zip(&ga).map(|(a, b)| a * b).sum::<f64>()
    };
    let frame = Frame::new(&scene, &cam, RenderOptions::default());
    let grads = frame
        .backward(Attributes::Color, &vec![0.0; 256 * 3], Some(&ga), &BackwardRequest { geometry_channels: 0..0, attributes: false })
        .unwrap();
    let h = 1e-5;
    for i in 0..6 {
        for k in [0, 1, 2, 7, 10] {
            let mut params = scene.primitives[i].to_params();
            let mut plus = scene.clone();
            params[k] += h;
            plus.primitives[i].set_params(&params);
            let mut minus = scene.clone();
            params[k] -= 2.0 * h;
            minus.primitives[i].set_params(&params);
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = grads.primitives[i].to_params()[k];
            assert!((an - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "prim {i} param {k}: {an} vs {fd}");
        }
    }
}

#[test]
fn backward_is_identical_for_any_thread_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let scene = random_scene(&mut rng, 10);
    let cam = front_camera(40, 40.0);
    let g: Vec<f64> = (0..40 * 40 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| render_backward(&scene, &cam, Attributes::Color, &g).unwrap())
    };
    let (a, b) = (run(1), run(3));
    for (x, y) in a.primitives.iter().zip(&b.primitives) {
        assert_eq!(x.to_params().map(f64::to_bits), y.to_params().map(f64::to_bits));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn weights_are_bounded(seed in any::<u64>(), n in 0usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_scene(&mut rng, n);
        let cam = front_camera(16, 16.0);
        let ones = vec![1.0; n];
        let map = render(&scene, &cam, Attributes::Features { dim: 1, values: &ones }).unwrap();
        for (v, a) in map.data.iter().zip(&map.accumulated_alpha) {
            prop_assert!(*a >= 0.0 && *a <= 1.0 + 1e-9);
            prop_assert!((v - a).abs() <= 1e-12);
        }
    }

    #[test]
    fn rendering_is_linear_in_features(seed in any::<u64>(), lambda in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..10);
        let scene = random_scene(&mut rng, n);
        let cam = front_camera(16, 16.0);
        let f: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sum: Vec<f64> = f.iter().zip(&g).map(|(a, b)| a + b).collect();
        let scaled: Vec<f64> = f.iter().map(|a| lambda * a).collect();
        let r = |v: &[f64]| render(&scene, &cam, Attributes::Features { dim: 2, values: v }).unwrap().data;
        let (rf, rg, rs, rl) = (r(&f), r(&g), r(&sum), r(&scaled));
        for i in 0..rf.len() {
            prop_assert!((rs[i] - rf[i] - rg[i]).abs() <= 1e-12);
            prop_assert!((rl[i] - lambda * rf[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn storage_order_does_not_matter(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..10);
        let scene = random_scene(&mut rng, n);
        let cam = front_camera(16, 16.0);
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        order.swap(0, n / 2);
        let permuted = scene.permuted(&order);
        let a = render(&scene, &cam, Attributes::Color).unwrap();
        let b = render(&permuted, &cam, Attributes::Color).unwrap();
        let bits = |m: &FeatureMap| m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }
}

#[test]
fn param_layout_matches_primitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = random_primitive(&mut rng);
    let mut q = GaussianPrimitive::isotropic(Vector3::zeros(), 1.0, 0.5, Vector3::zeros());
    q.set_params(&p.to_params());
    assert_eq!(p, q);
    assert_eq!(PARAMS_PER_PRIMITIVE, 14);
}
