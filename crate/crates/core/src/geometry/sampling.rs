//! Farthest point sampling and brute-force K-nearest neighbors.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use super::{PointCloud, Vec3};
use crate::autodiff::IndexMatrix;
use crate::error::{Error, Result};

/// Greedy farthest-point subset of `n` indices. Starts at `seed mod M`;
/// each next pick maximizes the distance to the chosen set, ties going to
/// the lowest index.
pub fn fps(pc: &PointCloud, n: usize, seed: u64) -> Result<Vec<usize>> {
    fps_points(pc.points(), n, seed)
}

pub fn fps_points(points: &[Vec3], n: usize, seed: u64) -> Result<Vec<usize>> {
    let m = points.len();
    if n == 0 || n > m {
        return Err(Error::Count { requested: n, available: m });
    }
    let start = (seed % m as u64) as usize;
    let mut chosen = Vec::with_capacity(n);
    chosen.push(start);
    let mut mind = vec![f64::INFINITY; m];
    let mut taken = vec![false; m];
    taken[start] = true;
    let mut last = start;
    while chosen.len() < n {
        let lp = points[last];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = (p - lp).norm_squared();
            if d < mind[i] {
                mind[i] = d;
            }
            if !taken[i] && mind[i] > best_d {
                best_d = mind[i];
                best = i;
            }
        }
        taken[best] = true;
        chosen.push(best);
        last = best;
    }
    Ok(chosen)
}

fn by_dist_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

fn nearest(reference: &[Vec3], q: &Vec3, k: usize, skip: Option<usize>, out: &mut Vec<usize>) {
    let mut d: Vec<(f64, usize)> = reference
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .map(|(i, p)| ((p - q).norm_squared(), i))
        .collect();
    if k < d.len() {
        d.select_nth_unstable_by(k, by_dist_then_index);
        d.truncate(k);
    }
    d.sort_unstable_by(by_dist_then_index);
    out.extend(d.iter().map(|&(_, i)| i));
}

/// For every query point, the `k` nearest reference indices by ascending
/// distance (ties by lowest index). A query that coincides with a reference
/// point finds itself at distance 0.
pub fn knn(reference: &PointCloud, queries: &PointCloud, k: usize) -> Result<IndexMatrix> {
    knn_points(reference.points(), queries.points(), k)
}

pub fn knn_points(reference: &[Vec3], queries: &[Vec3], k: usize) -> Result<IndexMatrix> {
    if k > reference.len() {
        return Err(Error::Count { requested: k, available: reference.len() });
    }
    let mut data = Vec::with_capacity(queries.len() * k);
    for q in queries {
        nearest(reference, q, k, None, &mut data);
    }
    IndexMatrix::new(queries.len(), k, data)
}

/// K-NN where the queries are reference points given by index; with
/// `exclude_self` the query's own index is left out of its neighborhood.
pub fn knn_of_indices(reference: &[Vec3], query_idx: &[usize], k: usize, exclude_self: bool) -> Result<IndexMatrix> {
    let avail = reference.len() - usize::from(exclude_self);
    if k > avail {
        return Err(Error::Count { requested: k, available: avail });
    }
    let mut data = Vec::with_capacity(query_idx.len() * k);
    for &qi in query_idx {
        let q = reference.get(qi).ok_or(Error::Index { index: qi, len: reference.len() })?;
        nearest(reference, q, k, exclude_self.then_some(qi), &mut data);
    }
    IndexMatrix::new(query_idx.len(), k, data)
}

/// K-NN over rows of a feature matrix `[n, d]`, self excluded.
pub fn knn_rows(features: &[f64], n: usize, d: usize, k: usize) -> Result<IndexMatrix> {
    if k >= n {
        return Err(Error::Count { requested: k, available: n.saturating_sub(1) });
    }
    let mut data = Vec::with_capacity(n * k);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let fi = &features[i * d..(i + 1) * d];
        dist.clear();
        for j in (0..n).filter(|&j| j != i) {
            let fj = &features[j * d..(j + 1) * d];
            let s: f64 = fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum();
            dist.push((s, j));
        }
        if k < dist.len() {
            dist.select_nth_unstable_by(k, by_dist_then_index);
            dist.truncate(k);
        }
        dist.sort_unstable_by(by_dist_then_index);
        data.extend(dist.iter().map(|&(_, j)| j));
    }
    IndexMatrix::new(n, k, data)
}
