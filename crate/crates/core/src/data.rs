//! Procedural object models and synthetic partial views with known poses.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    backproject, estimate_normals, fps, CameraIntrinsics, DepthImage, Mask, NormalField, PointCloud, RigidTransform,
    UnitQuaternion, Vec3,
};
use crate::rng::{mix, stream_rng, Rng};

/// Survivors required after culling and occlusion.
pub const MIN_SURVIVORS: usize = 32;
/// Regeneration attempts after the first.
pub const MAX_RETRIES: u64 = 10;
const MODEL_POINTS: usize = 1024;
const MODEL_SEED: u64 = 0x6d6f_6465_6c73;

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel {
    pub name: String,
    pub vertices: Vec<Vec3>,
    pub symmetric: bool,
    pub diameter: f64,
}

impl ObjectModel {
    pub fn new(name: &str, vertices: Vec<Vec3>, symmetric: bool) -> Result<Self> {
        if vertices.len() < 4 {
            return Err(Error::Precondition(format!("model `{name}` needs at least 4 vertices")));
        }
        let diameter = diameter(&vertices);
        if !(diameter > 0.0) {
            return Err(Error::Precondition(format!("model `{name}` has zero extent")));
        }
        Ok(Self { name: name.into(), vertices, symmetric, diameter })
    }
}

/// Largest pairwise vertex distance.
pub fn diameter(vertices: &[Vec3]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in vertices.iter().enumerate() {
        for b in &vertices[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    libm::sqrt(best)
}

fn normal3(rng: &mut Rng) -> Vec3 {
    Vector3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng))
}

fn unit_vector(rng: &mut Rng) -> Vec3 {
    loop {
        let v = normal3(rng);
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Uniformly distributed rotation: a normalized 4-vector of standard normals.
pub fn random_rotation(rng: &mut Rng) -> UnitQuaternion {
    loop {
        let raw: [f64; 4] = core::array::from_fn(|_| StandardNormal.sample(rng));
        if let Ok(q) = UnitQuaternion::normalize(raw) {
            return q;
        }
    }
}

type Face = (Vec3, Vec3, Vec3);

/// The six faces of an axis-aligned box as `(corner, edge_u, edge_v)`.
fn box_faces(lo: Vec3, hi: Vec3) -> [Face; 6] {
    let e = hi - lo;
    let (ex, ey, ez) = (Vector3::new(e.x, 0.0, 0.0), Vector3::new(0.0, e.y, 0.0), Vector3::new(0.0, 0.0, e.z));
    [
        (lo, ex, ey),
        (lo + ez, ex, ey),
        (lo, ex, ez),
        (lo + ey, ex, ez),
        (lo, ey, ez),
        (lo + ex, ey, ez),
    ]
}

fn inside(p: &Vec3, lo: &Vec3, hi: &Vec3) -> bool {
    (0..3).all(|i| p[i] > lo[i] + 1e-9 && p[i] < hi[i] - 1e-9)
}

fn sample_faces(rng: &mut Rng, faces: &[Face]) -> Vec3 {
    let areas: Vec<f64> = faces.iter().map(|f| f.1.cross(&f.2).norm()).collect();
    let total: f64 = areas.iter().sum();
    let mut r = rng.random::<f64>() * total;
    let mut pick = faces.len() - 1;
    for (i, a) in areas.iter().enumerate() {
        if r < *a {
            pick = i;
            break;
        }
        r -= a;
    }
    let (c, u, v) = faces[pick];
    c + u * rng.random::<f64>() + v * rng.random::<f64>()
}

fn centered(mut v: Vec<Vec3>) -> Vec<Vec3> {
    let c = v.iter().fold(Vector3::zeros(), |a, p| a + p) / v.len() as f64;
    v.iter_mut().for_each(|p| *p -= c);
    v
}

/// Surface of an L-shaped solid: a 100 × 40 × 12 mm base plate joined to a
/// 12 × 40 × 70 mm upright.
fn lbracket(rng: &mut Rng) -> Vec<Vec3> {
    let a = (Vector3::zeros(), Vector3::new(0.10, 0.04, 0.012));
    let b = (Vector3::zeros(), Vector3::new(0.012, 0.04, 0.07));
    let mut faces = box_faces(a.0, a.1).to_vec();
    faces.extend(box_faces(b.0, b.1));
    let mut pts = Vec::with_capacity(MODEL_POINTS);
    while pts.len() < MODEL_POINTS {
        let p = sample_faces(rng, &faces);
        if !inside(&p, &a.0, &a.1) && !inside(&p, &b.0, &b.1) {
            pts.push(p);
        }
    }
    centered(pts)
}

/// Superellipsoid `|x/a|³ + |y/b|³ + |z/c|³ = 1` with distinct semi-axes:
/// invariant under half turns about each axis.
fn eggboxoid(rng: &mut Rng) -> Vec<Vec3> {
    let (a, b, c, p) = (0.055, 0.04, 0.03, 3.0);
    (0..MODEL_POINTS)
        .map(|_| {
            let u = unit_vector(rng);
            let s = libm::pow(u.x.abs() / a, p) + libm::pow(u.y.abs() / b, p) + libm::pow(u.z.abs() / c, p);
            u * libm::pow(s, -1.0 / p)
        })
        .collect()
}

/// Open-top cylinder (radius 40 mm, height 90 mm) with a half-torus handle.
fn mug(rng: &mut Rng) -> Vec<Vec3> {
    let (r, h) = (0.04, 0.09);
    let (big, small) = (0.025, 0.006);
    let side = 2.0 * PI * r * h;
    let bottom = PI * r * r;
    let handle = PI * big * 2.0 * PI * small;
    let total = side + bottom + handle;
    let pts: Vec<Vec3> = (0..MODEL_POINTS)
        .map(|_| {
            let pick = rng.random::<f64>() * total;
            if pick < side {
                let th = rng.random::<f64>() * 2.0 * PI;
                Vector3::new(r * libm::cos(th), r * libm::sin(th), rng.random::<f64>() * h)
            } else if pick < side + bottom {
                let rr = r * libm::sqrt(rng.random::<f64>());
                let th = rng.random::<f64>() * 2.0 * PI;
                Vector3::new(rr * libm::cos(th), rr * libm::sin(th), 0.0)
            } else {
                // handle arc bulging along +x, centered at mid height
                let phi = (rng.random::<f64>() - 0.5) * PI;
                let psi = rng.random::<f64>() * 2.0 * PI;
                let ring = big + small * libm::cos(psi);
                Vector3::new(r + ring * libm::cos(phi), small * libm::sin(psi), h / 2.0 + ring * libm::sin(phi))
            }
        })
        .collect();
    centered(pts)
}

pub const MODEL_NAMES: [&str; 3] = ["Lbracket", "eggboxoid", "mug-like"];

/// One built-in model by name.
pub fn builtin_model(name: &str) -> Result<ObjectModel> {
    let idx = MODEL_NAMES
        .iter()
        .position(|n| *n == name)
        .ok_or_else(|| Error::Config(format!("unknown model `{name}` (known: {})", MODEL_NAMES.join(", "))))?;
    let mut rng = stream_rng(MODEL_SEED, idx as u64);
    match idx {
        0 => ObjectModel::new(name, lbracket(&mut rng), false),
        1 => ObjectModel::new(name, eggboxoid(&mut rng), true),
        _ => ObjectModel::new(name, mug(&mut rng), false),
    }
}

pub fn builtin_models() -> Vec<ObjectModel> {
    MODEL_NAMES.iter().map(|n| builtin_model(n).expect("built-in models are valid")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub train_samples: usize,
    pub val_samples: usize,
    /// Standard deviation of per-coordinate Gaussian noise, meters.
    pub noise_sigma: f64,
    /// Fraction removed as the points farthest along a random direction.
    pub cull_fraction: f64,
    /// Fraction removed as the points nearest a random surviving point.
    pub occluder_fraction: f64,
    pub translation_center: [f64; 3],
    /// Half extents of the translation box, meters.
    pub translation_extent: [f64; 3],
    /// Neighbors used for normal estimation.
    pub normal_k: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            train_samples: 256,
            val_samples: 64,
            noise_sigma: 0.002,
            cull_fraction: 0.3,
            occluder_fraction: 0.0,
            translation_center: [0.0, 0.0, 0.7],
            translation_extent: [0.1, 0.1, 0.1],
            normal_k: 12,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.cull_fraction) {
            return bad(format!("cull_fraction must lie in [0, 1), got {}", self.cull_fraction));
        }
        if !(0.0..1.0).contains(&self.occluder_fraction) {
            return bad(format!("occluder_fraction must lie in [0, 1), got {}", self.occluder_fraction));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if self.translation_extent.iter().any(|e| !(*e >= 0.0)) || self.translation_center.iter().any(|c| !c.is_finite())
        {
            return bad("translation box must be finite with non-negative extents".into());
        }
        if self.normal_k < 3 || self.normal_k >= MIN_SURVIVORS {
            return bad(format!("normal_k must lie in [3, {MIN_SURVIVORS}), got {}", self.normal_k));
        }
        if self.train_samples == 0 {
            return bad("train_samples must be positive".into());
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.train_samples + self.val_samples
    }
}

/// One synthetic observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub cloud: PointCloud,
    pub normals: NormalField,
    pub gt: RigidTransform,
    /// Rotation of `gt` as a quaternion; `gt.rotation` is exactly
    /// `quat_to_rot(gt_q)`, so storing the quaternion loses nothing.
    pub gt_q: UnitQuaternion,
    pub model_ref: String,
}

impl Sample {
    pub fn new(cloud: PointCloud, normals: NormalField, gt_q: UnitQuaternion, t: Vec3, model_ref: &str) -> Result<Self> {
        if normals.len() != cloud.len() {
            return Err(Error::Dimension {
                op: "sample",
                detail: format!("{} normals for {} points", normals.len(), cloud.len()),
            });
        }
        Ok(Self { cloud, normals, gt: RigidTransform::from_quat(&gt_q, t), gt_q, model_ref: model_ref.into() })
    }
}

/// Drops `count` entries of `keep` with the largest `key`, ties resolved
/// toward higher index so the result is deterministic.
fn drop_largest(keep: &mut Vec<usize>, count: usize, key: impl Fn(usize) -> f64) {
    let mut order: Vec<usize> = (0..keep.len()).collect();
    order.sort_by(|&a, &b| key(keep[b]).total_cmp(&key(keep[a])).then(keep[b].cmp(&keep[a])));
    let mut gone = alloc::vec![false; keep.len()];
    for &o in order.iter().take(count) {
        gone[o] = true;
    }
    let mut i = 0;
    keep.retain(|_| {
        i += 1;
        !gone[i - 1]
    });
}

fn attempt(model: &ObjectModel, cfg: &SceneConfig, rng: &mut Rng) -> Result<Option<Sample>> {
    let q = random_rotation(rng);
    let c = cfg.translation_center;
    let e = cfg.translation_extent;
    let t = Vector3::from_fn(|i, _| c[i] + e[i] * (2.0 * rng.random::<f64>() - 1.0));
    let gt = RigidTransform::from_quat(&q, t);
    let posed: Vec<Vec3> = model.vertices.iter().map(|v| gt.apply(v)).collect();
    let mut keep: Vec<usize> = (0..posed.len()).collect();

    let view = unit_vector(rng);
    let n_cull = (cfg.cull_fraction * keep.len() as f64) as usize;
    drop_largest(&mut keep, n_cull, |i| posed[i].dot(&view));

    let n_occ = (cfg.occluder_fraction * keep.len() as f64) as usize;
    let center = posed[keep[rng.random_range(0..keep.len())]];
    drop_largest(&mut keep, n_occ, |i| -(posed[i] - center).norm_squared());

    if keep.len() < MIN_SURVIVORS {
        return Ok(None);
    }
    let pts: Vec<Vec3> = keep
        .iter()
        .map(|&i| {
            if cfg.noise_sigma > 0.0 {
                posed[i] + normal3(rng) * cfg.noise_sigma
            } else {
                posed[i]
            }
        })
        .collect();
    let cloud = PointCloud::new(pts)?;
    let normals = estimate_normals(&cloud, cfg.normal_k, &Vector3::zeros())?;
    Ok(Some(Sample { cloud, normals, gt, gt_q: q, model_ref: model.name.clone() }))
}

/// Sample `index` of the scene. Fully determined by `(cfg.seed, index)`.
pub fn gen_sample(model: &ObjectModel, cfg: &SceneConfig, index: usize) -> Result<Sample> {
    cfg.validate()?;
    let key = mix(cfg.seed, index as u64);
    for retry in 0..=MAX_RETRIES {
        let mut rng = stream_rng(key, retry);
        if let Some(s) = attempt(model, cfg, &mut rng)? {
            return Ok(s);
        }
    }
    Err(Error::Generation(format!(
        "sample {index}: fewer than {MIN_SURVIVORS} points survive after {} attempts",
        MAX_RETRIES + 1
    )))
}

/// All train then val samples.
pub fn gen_samples(model: &ObjectModel, cfg: &SceneConfig) -> Result<Vec<Sample>> {
    (0..cfg.total_samples()).map(|i| gen_sample(model, cfg, i)).collect()
}

/// Depth + mask to a cloud with normals: backprojection, FPS down to
/// `max_points` when larger, normals oriented toward the camera origin.
pub fn preprocess(
    depth: &DepthImage,
    mask: &Mask,
    k: &CameraIntrinsics,
    max_points: usize,
    normal_k: usize,
) -> Result<(PointCloud, NormalField)> {
    let mut pc = backproject(depth, mask, k)?;
    if pc.len() > max_points {
        let idx = fps(&pc, max_points, 0)?;
        pc = pc.select(&idx)?;
    }
    let normals = estimate_normals(&pc, normal_k, &Vector3::zeros())?;
    Ok((pc, normals))
}
