//! ADD, ADD-S, threshold accuracy and AUC.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::{RigidTransform, Vec3};

/// Diameter fraction of the accuracy threshold.
pub const THRESHOLD_FRACTION: f64 = 0.1;
/// Upper integration limit of the ADD-S AUC, meters.
pub const AUC_MAX_M: f64 = 0.1;

/// Mean distance between corresponding vertices under `pred` and `gt`.
pub fn add(pred: &RigidTransform, gt: &RigidTransform, vertices: &[Vec3]) -> f64 {
    if vertices.is_empty() {
        return 0.0;
    }
    let s: f64 = vertices.iter().map(|x| (gt.apply(x) - pred.apply(x)).norm()).sum();
    s / vertices.len() as f64
}

/// For every predicted vertex, the distance to the closest ground-truth
/// vertex, averaged over vertices.
pub fn adds(pred: &RigidTransform, gt: &RigidTransform, vertices: &[Vec3]) -> f64 {
    if vertices.is_empty() {
        return 0.0;
    }
    let truth: Vec<Vec3> = vertices.iter().map(|x| gt.apply(x)).collect();
    let mut s = 0.0;
    for x in vertices {
        let p = pred.apply(x);
        let best = truth.iter().map(|g| (g - p).norm_squared()).fold(f64::INFINITY, f64::min);
        s += libm::sqrt(best);
    }
    s / vertices.len() as f64
}

/// Fraction of distances strictly below `fraction · diameter`.
pub fn add_01d(distances: &[f64], diameter: f64, fraction: f64) -> f64 {
    if distances.is_empty() {
        return 0.0;
    }
    let thr = fraction * diameter;
    distances.iter().filter(|&&d| d < thr).count() as f64 / distances.len() as f64
}

/// Area under the accuracy-vs-threshold curve on `[0, max]`, normalized:
/// the mean of `clamp(1 − d / max, 0, 1)`.
pub fn adds_auc(distances: &[f64], max: f64) -> f64 {
    if distances.is_empty() {
        return 0.0;
    }
    let s: f64 = distances.iter().map(|d| (1.0 - d / max).clamp(0.0, 1.0)).sum();
    s / distances.len() as f64
}

/// Accuracy at each of `steps + 1` evenly spaced thresholds in `[0, max]`.
pub fn accuracy_curve(distances: &[f64], max: f64, steps: usize) -> Vec<(f64, f64)> {
    (0..=steps)
        .map(|i| {
            let thr = max * i as f64 / steps.max(1) as f64;
            let n = distances.iter().filter(|&&d| d < thr).count();
            (thr, n as f64 / distances.len().max(1) as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: usize,
    pub add_m: f64,
    pub adds_m: f64,
    /// Whether the object's headline metric (ADD-S for symmetric objects,
    /// ADD otherwise) is below the threshold.
    pub pass_01d: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub symmetric: bool,
    pub diameter_m: f64,
    /// Headline accuracy: ADD-S for symmetric objects, ADD otherwise.
    pub accuracy_01d: f64,
    pub add_01d: f64,
    pub adds_01d: f64,
    pub adds_auc: f64,
    pub mean_add_m: f64,
    pub mean_adds_m: f64,
    pub samples: Vec<SampleMetrics>,
}

impl MetricReport {
    /// Distances of the headline metric.
    pub fn headline_distances(&self) -> Vec<f64> {
        self.samples.iter().map(|s| if self.symmetric { s.adds_m } else { s.add_m }).collect()
    }
}

/// Aggregates `(sample_id, add, adds)` triples.
pub fn aggregate(per_sample: &[(usize, f64, f64)], diameter: f64, symmetric: bool) -> MetricReport {
    let adds_d: Vec<f64> = per_sample.iter().map(|s| s.2).collect();
    let add_d: Vec<f64> = per_sample.iter().map(|s| s.1).collect();
    let thr = THRESHOLD_FRACTION * diameter;
    let samples: Vec<SampleMetrics> = per_sample
        .iter()
        .map(|&(id, a, s)| SampleMetrics {
            sample_id: id,
            add_m: a,
            adds_m: s,
            pass_01d: (if symmetric { s } else { a }) < thr,
        })
        .collect();
    let n = per_sample.len().max(1) as f64;
    MetricReport {
        count: per_sample.len(),
        symmetric,
        diameter_m: diameter,
        accuracy_01d: add_01d(if symmetric { &adds_d } else { &add_d }, diameter, THRESHOLD_FRACTION),
        add_01d: add_01d(&add_d, diameter, THRESHOLD_FRACTION),
        adds_01d: add_01d(&adds_d, diameter, THRESHOLD_FRACTION),
        adds_auc: adds_auc(&adds_d, AUC_MAX_M),
        mean_add_m: add_d.iter().sum::<f64>() / n,
        mean_adds_m: adds_d.iter().sum::<f64>() / n,
        samples,
    }
}

/// Scores `(pred, gt)` pairs against the full vertex set.
pub fn evaluate_poses(
    pairs: &[(usize, RigidTransform, RigidTransform)],
    vertices: &[Vec3],
    diameter: f64,
    symmetric: bool,
) -> MetricReport {
    let per: Vec<(usize, f64, f64)> =
        pairs.iter().map(|(id, p, g)| (*id, add(p, g, vertices), adds(p, g, vertices))).collect();
    aggregate(&per, diameter, symmetric)
}
