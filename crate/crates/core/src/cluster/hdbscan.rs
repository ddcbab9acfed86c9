use std::collections::BTreeMap;

use rayon::prelude::*;

/// Distance floor, so that duplicate points give a finite λ = 1/d.
const MIN_DISTANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extraction {
    ExcessOfMass,
    Leaf,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// One edge of the condensed tree. `child < n` is a point falling out of
/// `parent`; `child ≥ n` is a child cluster born at `lambda`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CondensedEdge {
    pub parent: usize,
    pub child: usize,
    pub lambda: f64,
    pub size: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ClusterHierarchy {
    pub n: usize,
    pub mst: Vec<MstEdge>,
    pub condensed: Vec<CondensedEdge>,
    /// Stability per condensed cluster id (ids start at `n`; `n` is the root).
    pub stability: BTreeMap<usize, f64>,
    pub selected: Vec<usize>,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn row(points: &[f64], dim: usize, i: usize) -> &[f64] {
    &points[i * dim..(i + 1) * dim]
}

/// Distance to the `min_samples`-th nearest neighbour, counting the point itself.
pub fn core_distances(points: &[f64], dim: usize, min_samples: usize) -> Vec<f64> {
    let n = points.len() / dim.max(1);
    let k = min_samples.clamp(1, n.max(1)) - 1;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let a = row(points, dim, i);
            let mut d: Vec<f64> = (0..n).map(|j| sq_dist(a, row(points, dim, j))).collect();
            let (_, kth, _) = d.select_nth_unstable_by(k, f64::total_cmp);
            kth.sqrt()
        })
        .collect()
}

/// Prim's algorithm on the complete mutual-reachability graph. Ties pick the
/// lowest vertex index.
pub fn mutual_reachability_mst(points: &[f64], dim: usize, core: &[f64]) -> Vec<MstEdge> {
    let n = core.len();
    if n < 2 {
        return Vec::new();
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let a = row(points, dim, current);
        let cc = core[current];
        best.par_iter_mut()
            .zip(from.par_iter_mut())
            .enumerate()
            .filter(|(j, _)| !in_tree[*j])
            .for_each(|(j, (b, f))| {
                let d = sq_dist(a, row(points, dim, j)).sqrt().max(cc).max(core[j]);
                if d < *b {
                    *b = d;
                    *f = current;
                }
            });
        let mut next = usize::MAX;
        for j in 0..n {
            if !in_tree[j] && (next == usize::MAX || best[j] < best[next]) {
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push(MstEdge {
            a: from[next],
            b: next,
            weight: best[next],
        });
        current = next;
    }
    edges
}

/// Single-linkage merges `(left, right, distance, size)` with new nodes
/// numbered from `n` in merge order.
fn single_linkage(n: usize, mst: &[MstEdge]) -> Vec<(usize, usize, f64, usize)> {
    let mut order: Vec<usize> = (0..mst.len()).collect();
    order.sort_by(|&x, &y| mst[x].weight.total_cmp(&mst[y].weight).then(x.cmp(&y)));
    let mut parent: Vec<usize> = (0..2 * n).collect();
    let mut size: Vec<usize> = vec![1; 2 * n];
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut out = Vec::with_capacity(mst.len());
    let mut next = n;
    for &e in &order {
        let a = find(&mut parent, mst[e].a);
        let b = find(&mut parent, mst[e].b);
        let s = size[a] + size[b];
        parent[a] = next;
        parent[b] = next;
        size[next] = s;
        out.push((a, b, mst[e].weight, s));
        next += 1;
    }
    out
}

fn condense(n: usize, linkage: &[(usize, usize, f64, usize)], min_cluster_size: usize) -> Vec<CondensedEdge> {
    let root = 2 * n - 2;
    let node = |x: usize| linkage[x - n];
    let size_of = |x: usize| if x < n { 1 } else { node(x).3 };
    let leaves = |x: usize| -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![x];
        while let Some(v) = stack.pop() {
            if v < n {
                out.push(v);
            } else {
                let (l, r, ..) = node(v);
                stack.push(r);
                stack.push(l);
            }
        }
        out
    };
    let lambda_of = |d: f64| 1.0 / d.max(MIN_DISTANCE);
    let mut relabel: BTreeMap<usize, usize> = BTreeMap::new();
    relabel.insert(root, n);
    let mut next_label = n + 1;
    let mut out = Vec::new();
    // breadth-first from the root
    let mut queue = std::collections::VecDeque::from([root]);
    let mut ignore = vec![false; 2 * n];
    while let Some(v) = queue.pop_front() {
        if v < n || ignore[v] {
            continue;
        }
        let (left, right, dist, _) = node(v);
        let lambda = lambda_of(dist);
        let parent = relabel[&v];
        let (ls, rs) = (size_of(left), size_of(right));
        match (ls >= min_cluster_size, rs >= min_cluster_size) {
            (true, true) => {
                for (child, s) in [(left, ls), (right, rs)] {
                    relabel.insert(child, next_label);
                    out.push(CondensedEdge {
                        parent,
                        child: next_label,
                        lambda,
                        size: s,
                    });
                    next_label += 1;
                    queue.push_back(child);
                }
            }
            (false, false) => {
                for child in [left, right] {
                    for p in leaves(child) {
                        out.push(CondensedEdge {
                            parent,
                            child: p,
                            lambda,
                            size: 1,
                        });
                    }
                    if child >= n {
                        ignore[child] = true;
                    }
                }
            }
            (big_left, _) => {
                let (big, small) = if big_left { (left, right) } else { (right, left) };
                relabel.insert(big, parent);
                queue.push_back(big);
                for p in leaves(small) {
                    out.push(CondensedEdge {
                        parent,
                        child: p,
                        lambda,
                        size: 1,
                    });
                }
                if small >= n {
                    ignore[small] = true;
                }
            }
        }
    }
    out
}

fn stabilities(n: usize, condensed: &[CondensedEdge]) -> BTreeMap<usize, f64> {
    let mut birth: BTreeMap<usize, f64> = BTreeMap::from([(n, 0.0)]);
    for e in condensed.iter().filter(|e| e.child >= n) {
        birth.insert(e.child, e.lambda);
    }
    let mut stab: BTreeMap<usize, f64> = birth.keys().map(|&c| (c, 0.0)).collect();
    for e in condensed {
        *stab.get_mut(&e.parent).expect("parent is a cluster") += (e.lambda - birth[&e.parent]) * e.size as f64;
    }
    stab
}

fn select(n: usize, condensed: &[CondensedEdge], stability: &BTreeMap<usize, f64>, extraction: Extraction) -> Vec<usize> {
    let mut children: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for e in condensed.iter().filter(|e| e.child >= n) {
        children.entry(e.parent).or_default().push(e.child);
    }
    let clusters: Vec<usize> = stability.keys().copied().filter(|&c| c != n).collect();
    match extraction {
        Extraction::Leaf => clusters.into_iter().filter(|c| !children.contains_key(c)).collect(),
        Extraction::ExcessOfMass => {
            let mut chosen: BTreeMap<usize, bool> = clusters.iter().map(|&c| (c, true)).collect();
            let mut value = stability.clone();
            // children carry larger ids than their parents
            for &c in clusters.iter().rev() {
                let kids = children.get(&c).cloned().unwrap_or_default();
                let subtree: f64 = kids.iter().map(|k| value[k]).sum();
                if subtree > value[&c] {
                    chosen.insert(c, false);
                    value.insert(c, subtree);
                } else {
                    let mut stack = kids;
                    while let Some(k) = stack.pop() {
                        chosen.insert(k, false);
                        if let Some(g) = children.get(&k) {
                            stack.extend(g);
                        }
                    }
                }
            }
            chosen.into_iter().filter_map(|(c, keep)| keep.then_some(c)).collect()
        }
    }
}

/// Labels `0..k` for the selected clusters in ascending condensed id, −1 for noise.
fn label_points(n: usize, condensed: &[CondensedEdge], selected: &[usize]) -> Vec<i64> {
    let mut parent_of: BTreeMap<usize, usize> = BTreeMap::new();
    let mut point_parent = vec![n; n];
    for e in condensed {
        if e.child >= n {
            parent_of.insert(e.child, e.parent);
        } else {
            point_parent[e.child] = e.parent;
        }
    }
    let label_of: BTreeMap<usize, i64> = selected.iter().enumerate().map(|(i, &c)| (c, i as i64)).collect();
    point_parent
        .iter()
        .map(|&c| {
            let mut cur = Some(c);
            while let Some(v) = cur {
                if let Some(&l) = label_of.get(&v) {
                    return l;
                }
                cur = parent_of.get(&v).copied();
            }
            -1
        })
        .collect()
}

/// HDBSCAN over `n × dim` row-major points.
pub fn hdbscan(
    points: &[f64],
    dim: usize,
    min_cluster_size: usize,
    min_samples: usize,
    extraction: Extraction,
) -> (Vec<i64>, ClusterHierarchy) {
    let n = if dim == 0 { 0 } else { points.len() / dim };
    if n < min_cluster_size.max(2) {
        let mst = if n >= 2 {
            mutual_reachability_mst(points, dim, &core_distances(points, dim, min_samples))
        } else {
            Vec::new()
        };
        return (
            vec![-1; n],
            ClusterHierarchy {
                n,
                mst,
                ..ClusterHierarchy::default()
            },
        );
    }
    let core = core_distances(points, dim, min_samples);
    let mst = mutual_reachability_mst(points, dim, &core);
    let linkage = single_linkage(n, &mst);
    let condensed = condense(n, &linkage, min_cluster_size.max(2));
    let stability = stabilities(n, &condensed);
    let selected = select(n, &condensed, &stability, extraction);
    let labels = label_points(n, &condensed, &selected);
    (
        labels,
        ClusterHierarchy {
            n,
            mst,
            condensed,
            stability,
            selected,
        },
    )
}
