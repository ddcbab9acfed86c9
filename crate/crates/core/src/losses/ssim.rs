//! Windowed SSIM with an 11×11 Gaussian window (σ = 1.5), zero padding, and
//! its gradient with respect to the first image.

use crate::raster::FeatureMap;

pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

fn kernel() -> [f64; WINDOW] {
    let half = (WINDOW / 2) as f64;
    let mut k = [0.0; WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable correlation of one `h × w` plane with zero padding. The kernel
/// is symmetric, so this is also its own adjoint.
fn blur(src: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let r = (WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn plane(map: &FeatureMap, c: usize) -> Vec<f64> {
    (0..map.pixel_count()).map(|p| map.data[p * map.dim + c]).collect()
}

/// Mean SSIM over pixels and channels, with `d mean / d x` when `want_grad` is set.
pub fn ssim(x: &FeatureMap, y: &FeatureMap, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let (w, h, dim) = (x.width, x.height, x.dim);
    let n = (w * h * dim) as f64;
    let k = kernel();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; x.data.len()]);
    for c in 0..dim {
        let xs = plane(x, c);
        let ys = plane(y, c);
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let mx = blur(&xs, w, h, &k);
        let my = blur(&ys, w, h, &k);
        let exx = blur(&sq(&xs, &xs), w, h, &k);
        let eyy = blur(&sq(&ys, &ys), w, h, &k);
        let exy = blur(&sq(&xs, &ys), w, h, &k);
        let mut da = vec![0.0; w * h];
        let mut db = vec![0.0; w * h];
        let mut dc = vec![0.0; w * h];
        for p in 0..w * h {
            let (ux, uy) = (mx[p], my[p]);
            let vx = exx[p] - ux * ux;
            let vy = eyy[p] - uy * uy;
            let cxy = exy[p] - ux * uy;
            let a1 = 2.0 * ux * uy + C1;
            let a2 = 2.0 * cxy + C2;
            let b1 = ux * ux + uy * uy + C1;
            let b2 = vx + vy + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let d_mu = 2.0 * uy * a2 / (b1 * b2) - s * 2.0 * ux / b1;
                let d_var = -s / b2;
                let d_cov = 2.0 * a1 / (b1 * b2);
                da[p] = d_mu - 2.0 * ux * d_var - uy * d_cov;
                db[p] = d_var;
                dc[p] = d_cov;
            }
        }
        if let Some(g) = grad.as_mut() {
            let ga = blur(&da, w, h, &k);
            let gb = blur(&db, w, h, &k);
            let gc = blur(&dc, w, h, &k);
            for p in 0..w * h {
                g[p * dim + c] = (ga[p] + 2.0 * xs[p] * gb[p] + ys[p] * gc[p]) / n;
            }
        }
    }
    (total / n, grad)
}
