use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// IoU at or above which a prediction counts as accurate.
pub const ACC_IOU: f64 = 0.25;

/// `|P ∩ G| / |P ∪ G|`; 1 when both are empty.
pub fn iou(predicted: &[bool], truth: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in predicted.iter().zip(truth) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 { 1.0 } else { inter as f64 / union as f64 }
}

pub fn iou_sets(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 { 1.0 } else { a.intersection(b).count() as f64 / union as f64 }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouRecord {
    pub query: String,
    pub view: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub records: Vec<IouRecord>,
    pub miou: f64,
    pub macc: f64,
    /// Query → (mIoU, mAcc) over that query's records.
    pub per_query: BTreeMap<String, (f64, f64)>,
}

impl MetricReport {
    pub fn from_records(records: Vec<IouRecord>) -> Self {
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let acc = |v: &[f64]| mean(&v.iter().map(|&x| (x >= ACC_IOU) as u8 as f64).collect::<Vec<_>>());
        let all: Vec<f64> = records.iter().map(|r| r.iou).collect();
        let mut grouped: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &records {
            grouped.entry(r.query.clone()).or_default().push(r.iou);
        }
        Self {
            miou: mean(&all),
            macc: acc(&all),
            per_query: grouped.into_iter().map(|(q, v)| (q, (mean(&v), acc(&v)))).collect(),
            records,
        }
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "pairs = {}\nmiou = {:.6}\nmacc@{ACC_IOU} = {:.6}\n",
            self.records.len(),
            self.miou,
            self.macc
        );
        for (q, (m, a)) in &self.per_query {
            let _ = writeln!(s, "query {q}: miou = {m:.6} macc = {a:.6}");
        }
        s
    }
}

/// One predicted/ground-truth mask pair of a query in a view.
#[derive(Clone, Copy, Debug)]
pub struct MaskPair<'a> {
    pub query: &'a str,
    pub view: usize,
    pub predicted: &'a [bool],
    pub truth: &'a [bool],
}

/// Averages over query–view pairs.
pub fn selection_metrics(pairs: &[MaskPair]) -> Result<MetricReport> {
    let mut records = Vec::with_capacity(pairs.len());
    for p in pairs {
        if p.predicted.len() != p.truth.len() {
            return Err(Error::Shape(format!(
                "query {} view {}: predicted mask has {} pixels, ground truth {}",
                p.query,
                p.view,
                p.predicted.len(),
                p.truth.len()
            )));
        }
        records.push(IouRecord {
            query: p.query.to_string(),
            view: p.view,
            iou: iou(p.predicted, p.truth),
        });
    }
    Ok(MetricReport::from_records(records))
}

fn groups(labels: &[i64], keep: impl Fn(usize) -> bool) -> BTreeMap<i64, BTreeSet<usize>> {
    let mut out: BTreeMap<i64, BTreeSet<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if keep(i) {
            out.entry(l).or_default().insert(i);
        }
    }
    out
}

/// Greedy matching in ascending ground-truth id; each ground-truth instance
/// takes the unmatched prediction of highest positive IoU (lowest id on ties).
/// Ground-truth labels ≤ 0 are unannotated and excluded from both sides;
/// predicted −1 is noise and never matched.
pub fn instance_seg_metrics(pred: &[i64], gt: &[i64]) -> Result<MetricReport> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predicted labels but {} ground-truth labels",
            pred.len(),
            gt.len()
        )));
    }
    let annotated = |i: usize| gt[i] > 0;
    let truth = groups(gt, annotated);
    let mut predicted = groups(pred, |i| annotated(i) && pred[i] >= 0);
    let mut records = Vec::with_capacity(truth.len());
    for (g, members) in &truth {
        let mut best: Option<(i64, f64)> = None;
        for (p, pm) in &predicted {
            let v = iou_sets(members, pm);
            if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                best = Some((*p, v));
            }
        }
        let value = match best {
            Some((p, v)) => {
                predicted.remove(&p);
                v
            }
            None => 0.0,
        };
        records.push(IouRecord {
            query: format!("instance_{g}"),
            view: 0,
            iou: value,
        });
    }
    Ok(MetricReport::from_records(records))
}

/// Adjusted Rand index between two labelings (every distinct value is one
/// cluster, −1 included). 1 when both are a single cluster.
pub fn adjusted_rand_index(a: &[i64], b: &[i64]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len() as f64;
    let comb = |x: f64| x * (x - 1.0) / 2.0;
    let mut table: BTreeMap<(i64, i64), f64> = BTreeMap::new();
    let mut rows: BTreeMap<i64, f64> = BTreeMap::new();
    let mut cols: BTreeMap<i64, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *rows.entry(x).or_default() += 1.0;
        *cols.entry(y).or_default() += 1.0;
    }
    let index: f64 = table.values().map(|&c| comb(c)).sum();
    let ra: f64 = rows.values().map(|&c| comb(c)).sum();
    let cb: f64 = cols.values().map(|&c| comb(c)).sum();
    let expected = if n > 1.0 { ra * cb / comb(n) } else { 0.0 };
    let max = 0.5 * (ra + cb);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// `query,view,iou` with one row per record.
pub fn metrics_csv(report: &MetricReport) -> String {
    let mut s = String::from("query,view,iou\n");
    for r in &report.records {
        let _ = writeln!(s, "{},{},{:.8}", r.query, r.view, r.iou);
    }
    s
}
