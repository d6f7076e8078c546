use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kdtree::{dist2, KdTree};
use super::{EvalError, Point3};
use crate::geometry::DepthMap;

/// Default precision/recall distance threshold in metres.
pub const DEFAULT_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Metrics2D {
    pub mae: f64,
    pub rmse: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub delta_105: f64,
    pub delta_125: f64,
}

impl Metrics2D {
    pub const FIELDS: [&'static str; 6] = ["mae", "rmse", "abs_rel", "sq_rel", "delta_105", "delta_125"];

    pub fn values(&self) -> [f64; 6] {
        [self.mae, self.rmse, self.abs_rel, self.sq_rel, self.delta_105, self.delta_125]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        Self { mae: v[0], rmse: v[1], abs_rel: v[2], sq_rel: v[3], delta_105: v[4], delta_125: v[5] }
    }

    /// Field-wise mean.
    pub fn mean(items: &[Metrics2D]) -> Option<Metrics2D> {
        if items.is_empty() {
            return None;
        }
        let mut acc = [0.0; 6];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.values()) {
                *a += v;
            }
        }
        Some(Self::from_values(acc.map(|a| a / items.len() as f64)))
    }
}

/// Errors over pixels where `gt` is valid.
pub fn metrics_2d(pred: &DepthMap, gt: &DepthMap) -> Result<Metrics2D, EvalError> {
    if !pred.same_shape(gt) {
        return Err(EvalError::DimensionMismatch("prediction vs ground truth".into()));
    }
    let mut sums = [0.0; 6];
    let mut n = 0usize;
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        if g <= 0.0 {
            continue;
        }
        let e = p - g;
        let ratio = if p > 0.0 { (p / g).max(g / p) } else { f64::INFINITY };
        sums[0] += e.abs();
        sums[1] += e * e;
        sums[2] += e.abs() / g;
        sums[3] += e * e / g;
        sums[4] += f64::from(u8::from(ratio < 1.05));
        sums[5] += f64::from(u8::from(ratio < 1.25));
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::EmptyValidSet);
    }
    let nf = n as f64;
    Ok(Metrics2D {
        mae: sums[0] / nf,
        rmse: (sums[1] / nf).sqrt(),
        abs_rel: sums[2] / nf,
        sq_rel: sums[3] / nf,
        delta_105: sums[4] / nf,
        delta_125: sums[5] / nf,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Metrics3D {
    pub comp: f64,
    pub acc: f64,
    pub chamfer: f64,
    pub prec: f64,
    pub recall: f64,
    pub fscore: f64,
}

impl Metrics3D {
    pub const FIELDS: [&'static str; 6] = ["comp", "acc", "chamfer", "prec", "recall", "fscore"];

    pub fn values(&self) -> [f64; 6] {
        [self.comp, self.acc, self.chamfer, self.prec, self.recall, self.fscore]
    }
}

/// Exact nearest distances from each point of `a` to the set `b`.
pub fn brute_force_nn(a: &[Point3], b: &[Point3]) -> Result<Vec<f64>, EvalError> {
    if b.is_empty() {
        return Err(EvalError::EmptyPointSet);
    }
    Ok(a.iter().map(|p| b.iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min).sqrt()).collect())
}

fn nn_distances(a: &[Point3], tree: &KdTree) -> Vec<f64> {
    a.par_iter().map(|p| tree.nearest_distance(p).expect("non-empty tree")).collect()
}

pub fn metrics_3d(pred: &[Point3], gt: &[Point3], threshold: f64) -> Result<Metrics3D, EvalError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(EvalError::EmptyPointSet);
    }
    let to_gt = nn_distances(pred, &KdTree::build(gt));
    let to_pred = nn_distances(gt, &KdTree::build(pred));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let within = |v: &[f64]| v.iter().filter(|&&d| d < threshold).count() as f64 / v.len() as f64;
    let acc = mean(&to_gt);
    let comp = mean(&to_pred);
    let prec = within(&to_gt);
    let recall = within(&to_pred);
    let fscore = if prec + recall > 0.0 { 2.0 * prec * recall / (prec + recall) } else { 0.0 };
    Ok(Metrics3D { comp, acc, chamfer: (acc + comp) / 2.0, prec, recall, fscore })
}
