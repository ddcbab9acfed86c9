use std::collections::VecDeque;

use rayon::prelude::*;

use super::hdbscan::sq_dist;

/// Neighbours within `eps` (inclusive), the point itself included.
fn neighbourhoods(points: &[f64], dim: usize, eps: f64) -> Vec<Vec<usize>> {
    let n = points.len() / dim.max(1);
    let e2 = eps * eps;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let a = &points[i * dim..(i + 1) * dim];
            (0..n)
                .filter(|&j| sq_dist(a, &points[j * dim..(j + 1) * dim]) <= e2)
                .collect()
        })
        .collect()
}

/// Classic DBSCAN. Clusters are numbered in the order their first core point
/// appears; a border point joins the first cluster that reaches it.
pub fn dbscan(points: &[f64], dim: usize, eps: f64, min_pts: usize) -> Vec<i64> {
    let n = if dim == 0 { 0 } else { points.len() / dim };
    let nbrs = neighbourhoods(points, dim, eps);
    let core: Vec<bool> = nbrs.iter().map(|v| v.len() >= min_pts).collect();
    let mut labels = vec![-1i64; n];
    let mut next = 0i64;
    let mut queue = VecDeque::new();
    for i in 0..n {
        if labels[i] != -1 || !core[i] {
            continue;
        }
        labels[i] = next;
        queue.push_back(i);
        while let Some(p) = queue.pop_front() {
            for &q in &nbrs[p] {
                if labels[q] == -1 {
                    labels[q] = next;
                    if core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
        next += 1;
    }
    labels
}

/// Median distance from each point to its nearest other point.
pub fn median_nn_distance(points: &[f64], dim: usize) -> Option<f64> {
    let n = points.len() / dim.max(1);
    if n < 2 {
        return None;
    }
    let mut d: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let a = &points[i * dim..(i + 1) * dim];
            (0..n)
                .filter(|&j| j != i)
                .map(|j| sq_dist(a, &points[j * dim..(j + 1) * dim]))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    d.sort_by(f64::total_cmp);
    Some(if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) })
}
