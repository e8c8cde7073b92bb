use alloc::vec::Vec;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use super::sampling::knn_of_indices;
use super::{RigidTransform, Vec3};
use crate::error::{Error, Result};

/// Points in meters, camera frame unless stated otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if !points.iter().all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(Error::Precondition("non-finite coordinate in point cloud".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Subset by index, in the order given.
    pub fn select(&self, idx: &[usize]) -> Result<PointCloud> {
        let pts = idx
            .iter()
            .map(|&i| self.points.get(i).copied().ok_or(Error::Index { index: i, len: self.len() }))
            .collect::<Result<Vec<_>>>()?;
        PointCloud::new(pts)
    }

    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud { points: self.points.iter().map(|p| t.apply(p)).collect() }
    }

    pub fn translated(&self, v: &Vec3) -> PointCloud {
        PointCloud { points: self.points.iter().map(|p| p + v).collect() }
    }

    pub fn barycenter(&self) -> Vec3 {
        barycenter(self)
    }
}

/// Coordinate-wise mean.
pub fn barycenter(pc: &PointCloud) -> Vec3 {
    let sum = pc.points.iter().fold(Vector3::zeros(), |acc, p| acc + p);
    sum / pc.len() as f64
}

/// Maps every point through `t`.
pub fn apply_transform(t: &RigidTransform, pc: &PointCloud) -> PointCloud {
    pc.transformed(t)
}

/// Unit normals aligned with a [`PointCloud`]'s indices.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalField {
    normals: Vec<Vec3>,
    /// Count of neighborhoods too degenerate to define a plane; those
    /// points carry the fallback normal `(0, 0, 1)`.
    pub degenerate: usize,
}

impl NormalField {
    pub fn new(normals: Vec<Vec3>) -> Result<Self> {
        if normals.iter().any(|n| (n.norm() - 1.0).abs() > 1e-9) {
            return Err(Error::Precondition("normals must have unit length".into()));
        }
        Ok(Self { normals, degenerate: 0 })
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> NormalField {
        NormalField { normals: idx.iter().map(|&i| self.normals[i]).collect(), degenerate: 0 }
    }

    pub fn rotated(&self, r: &Matrix3<f64>) -> NormalField {
        NormalField { normals: self.normals.iter().map(|n| (r * n).normalize()).collect(), degenerate: self.degenerate }
    }
}

/// Smallest-eigenvalue direction of a symmetric 3x3 matrix. Eigenvalues
/// within `1e-12` (relative) of each other tie, and the lowest eigenvector
/// index wins.
fn smallest_eigvec(cov: &Matrix3<f64>) -> (Vec3, [f64; 3]) {
    let eig = SymmetricEigen::new(*cov);
    let vals = [eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]];
    let scale = vals.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut best = 0;
    for i in 1..3 {
        if vals[i] < vals[best] - 1e-12 * scale {
            best = i;
        }
    }
    (eig.eigenvectors.column(best).into_owned(), vals)
}

/// Local-PCA normals from the `k` nearest neighbors (self included),
/// oriented so that `n · (viewpoint − p) ≥ 0`.
pub fn estimate_normals(pc: &PointCloud, k: usize, viewpoint: &Vec3) -> Result<NormalField> {
    if k < 3 || k >= pc.len() {
        return Err(Error::Precondition(alloc::format!(
            "normal estimation needs 3 <= k < M (k = {k}, M = {})",
            pc.len()
        )));
    }
    let all: Vec<usize> = (0..pc.len()).collect();
    let nbrs = knn_of_indices(pc.points(), &all, k, false)?;
    let mut normals = Vec::with_capacity(pc.len());
    let mut degenerate = 0;
    for (i, p) in pc.points().iter().enumerate() {
        let row = nbrs.row(i);
        let mean = row.iter().fold(Vector3::zeros(), |a, &j| a + pc.points()[j]) / k as f64;
        let mut cov = Matrix3::zeros();
        for &j in row {
            let d = pc.points()[j] - mean;
            cov += d * d.transpose();
        }
        cov /= k as f64;
        let (v, vals) = smallest_eigvec(&cov);
        let mut sorted = vals;
        sorted.sort_by(|a, b| a.total_cmp(b));
        // rank < 2: the two largest eigenvalues cannot both be significant
        if !(sorted[1] > 1e-12 * sorted[2].max(f64::MIN_POSITIVE)) || sorted[2] <= 0.0 {
            degenerate += 1;
            normals.push(Vector3::z());
            continue;
        }
        let mut n = v.normalize();
        if n.dot(&(viewpoint - p)) < 0.0 {
            n = -n;
        }
        normals.push(n);
    }
    Ok(NormalField { normals, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::Rng as _;

    use crate::rng::stream_rng;

    #[test]
    fn barycenter_examples() {
        let p = Vector3::new(0.3, -0.1, 2.0);
        assert_eq!(barycenter(&PointCloud::new(vec![p]).unwrap()), p);
        let pc = PointCloud::new(vec![Vector3::zeros(), Vector3::new(2.0, 0.0, 0.0)]).unwrap();
        assert_eq!(barycenter(&pc), Vector3::new(1.0, 0.0, 0.0));

        let mut rng = stream_rng(3, 0);
        let pts: Vec<Vec3> = (0..500)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0)))
            .collect();
        let (mut sx, mut sy, mut sz) = (0.0, 0.0, 0.0);
        for p in &pts {
            sx += p.x;
            sy += p.y;
            sz += p.z;
        }
        let n = pts.len() as f64;
        let b = barycenter(&PointCloud::new(pts).unwrap());
        assert!((b - Vector3::new(sx / n, sy / n, sz / n)).abs().max() < 1e-12);
    }

    #[test]
    fn empty_cloud_rejected() {
        assert_eq!(PointCloud::new(vec![]).err(), Some(Error::EmptyCloud));
    }

    #[test]
    fn planar_normals_face_viewpoint() {
        let mut pts = Vec::new();
        for i in 0..8 {
            for j in 0..8 {
                pts.push(Vector3::new(i as f64 * 0.1, j as f64 * 0.1, 0.0));
            }
        }
        let pc = PointCloud::new(pts).unwrap();
        let nf = estimate_normals(&pc, 6, &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(nf.degenerate, 0);
        for n in nf.normals() {
            assert!((n - Vector3::z()).abs().max() < 1e-12, "{n}");
        }
    }

    #[test]
    fn sphere_normals_are_radial() {
        // Fibonacci sphere, viewed from the origin: normals point inward,
        // so compare against the inward radial direction.
        let m = 800;
        let golden = core::f64::consts::PI * (3.0 - libm::sqrt(5.0));
        let pts: Vec<Vec3> = (0..m)
            .map(|i| {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / m as f64;
                let r = libm::sqrt(1.0 - y * y);
                let th = golden * i as f64;
                Vector3::new(r * libm::cos(th), y, r * libm::sin(th))
            })
            .collect();
        let pc = PointCloud::new(pts.clone()).unwrap();
        let nf = estimate_normals(&pc, 10, &Vector3::zeros()).unwrap();
        for (p, n) in pts.iter().zip(nf.normals()) {
            assert!(n.dot(&(-p)) >= 0.99, "{p} {n}");
        }
    }

    #[test]
    fn normals_require_k_below_m() {
        let pc = PointCloud::new(vec![Vector3::zeros(); 4]).unwrap();
        assert!(estimate_normals(&pc, 4, &Vector3::zeros()).is_err());
        assert!(estimate_normals(&pc, 2, &Vector3::zeros()).is_err());
    }

    #[test]
    fn collinear_neighborhood_is_flagged() {
        let pts: Vec<Vec3> = (0..10).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let nf = estimate_normals(&PointCloud::new(pts).unwrap(), 4, &Vector3::zeros()).unwrap();
        assert_eq!(nf.degenerate, 10);
        assert!(nf.normals().iter().all(|n| *n == Vector3::z()));
    }
}
