//! On-disk datasets: `manifest.json` plus one PLY cloud (with normals) per
//! sample under `clouds/`.

use std::ops::Range;
use std::path::{Path, PathBuf};

use geopose_core::data::{builtin_model, ObjectModel, Sample};
use geopose_core::geometry::{NormalField, PointCloud, UnitQuaternion};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{read_json, write_atomic, write_json};
use crate::ply;

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
/// Meters per depth unit recorded for synthetic data (millimeter depth).
pub const SYNTHETIC_DEPTH_SCALE: f64 = 0.001;
/// Tolerance on stored quaternion norms.
const UNIT_TOL: f64 = 1e-9;
/// Tolerance on stored normal lengths.
const NORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    /// Half-open `[lo, hi)` sample-id range.
    pub train: [usize; 2],
    pub val: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: usize,
    /// Path relative to the dataset directory.
    pub cloud_ply: String,
    /// Rotation, scalar last.
    pub q: [f64; 4],
    pub t: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub model: String,
    pub depth_scale: f64,
    pub symmetric: bool,
    pub diameter_m: f64,
    pub splits: Splits,
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub model: ObjectModel,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(format!("unknown split `{s}` (expected train or val)")),
        }
    }
}

impl Dataset {
    pub fn range(&self, split: Split) -> Range<usize> {
        let [lo, hi] = match split {
            Split::Train => self.manifest.splits.train,
            Split::Val => self.manifest.splits.val,
        };
        lo..hi
    }

    /// Samples of a split with their ids.
    pub fn split(&self, split: Split) -> (&[Sample], Vec<usize>) {
        let r = self.range(split);
        let ids = self.manifest.samples[r.clone()].iter().map(|e| e.id).collect();
        (&self.samples[r], ids)
    }
}

fn cloud_name(id: usize) -> String {
    format!("clouds/{id:06}.ply")
}

/// Writes `samples` (train first, then val) with the manifest last, so an
/// interrupted save never leaves a manifest pointing at missing clouds.
pub fn save(dir: &Path, model: &ObjectModel, samples: &[Sample], n_train: usize) -> Result<Manifest> {
    if n_train > samples.len() {
        return Err(Error::Config(format!("{n_train} train samples requested from {}", samples.len())));
    }
    std::fs::create_dir_all(dir.join("clouds")).map_err(|e| Error::io(dir.join("clouds"), e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (id, s) in samples.iter().enumerate() {
        let rel = cloud_name(id);
        let text = ply::to_string(s.cloud.points(), Some(s.normals.normals()));
        write_atomic(&dir.join(&rel), text.as_bytes())?;
        let t = s.gt.translation;
        entries.push(SampleEntry { id, cloud_ply: rel, q: s.gt_q.components(), t: [t.x, t.y, t.z] });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        model: model.name.clone(),
        depth_scale: SYNTHETIC_DEPTH_SCALE,
        symmetric: model.symmetric,
        diameter_m: model.diameter,
        splits: Splits { train: [0, n_train], val: [n_train, samples.len()] },
        samples: entries,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

fn check_manifest(path: &Path, m: &Manifest, model: &ObjectModel) -> Result<()> {
    let bad = |msg: String| Err(Error::dataset(path, msg));
    if m.version != MANIFEST_VERSION {
        return bad(format!("unsupported manifest version {}", m.version));
    }
    if m.symmetric != model.symmetric {
        return bad(format!("symmetric flag {} disagrees with model `{}`", m.symmetric, model.name));
    }
    if m.diameter_m.to_bits() != model.diameter.to_bits() {
        return bad(format!("diameter {} disagrees with model `{}` ({})", m.diameter_m, model.name, model.diameter));
    }
    if !(m.depth_scale > 0.0 && m.depth_scale.is_finite()) {
        return bad(format!("depth_scale must be positive, got {}", m.depth_scale));
    }
    let n = m.samples.len();
    let [a, b] = m.splits.train;
    let [c, d] = m.splits.val;
    if !(a <= b && b <= c && c <= d && d <= n) || b == a {
        return bad(format!("splits train [{a},{b}) val [{c},{d}) are not disjoint ordered ranges within {n} samples"));
    }
    Ok(())
}

fn load_sample(dir: &Path, e: &SampleEntry, model: &str) -> Result<Sample> {
    let bad = |msg: String| Err(Error::dataset(dir, format!("sample {}: {msg}", e.id)));
    let qn = e.q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !((qn - 1.0).abs() <= UNIT_TOL) {
        return bad(format!("rotation quaternion has norm {qn}, not 1"));
    }
    if !e.t.iter().chain(&e.q).all(|v| v.is_finite()) {
        return bad("non-finite pose".into());
    }
    let path = dir.join(&e.cloud_ply);
    if !path.is_file() {
        return bad(format!("missing cloud file {}", e.cloud_ply));
    }
    let cloud = ply::read(&path)?;
    let Some(normals) = cloud.normals else {
        return bad(format!("{} has no normals", e.cloud_ply));
    };
    if let Some(n) = normals.iter().find(|n| (n.norm() - 1.0).abs() > NORMAL_TOL) {
        return bad(format!("non-unit normal {n:?}"));
    }
    let cloud = PointCloud::new(cloud.points)?;
    let normals = NormalField::new(normals)?;
    // Normalizing an already-unit quaternion can perturb the last bit, so
    // the stored components are used verbatim once validated.
    let q = UnitQuaternion::from_components_unchecked(e.q);
    let s = Sample::new(cloud, normals, q, Vector3::from(e.t), model)?;
    if let Err(err) = s.gt.validate(UNIT_TOL) {
        return bad(format!("invalid pose: {err}"));
    }
    Ok(s)
}

/// Loads and validates a dataset; any violation names the offending sample.
pub fn load(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let manifest: Manifest = read_json(&mpath)?;
    let model = builtin_model(&manifest.model).map_err(|e| Error::dataset(&mpath, e.to_string()))?;
    check_manifest(&mpath, &manifest, &model)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for (i, e) in manifest.samples.iter().enumerate() {
        if e.id != i {
            return Err(Error::dataset(&mpath, format!("sample ids must be 0..n in order; entry {i} has id {}", e.id)));
        }
        samples.push(load_sample(dir, e, &manifest.model)?);
    }
    let on_disk = count_clouds(&dir.join("clouds"))?;
    if on_disk != manifest.samples.len() {
        return Err(Error::dataset(
            &mpath,
            format!("manifest lists {} samples but clouds/ holds {on_disk} files", manifest.samples.len()),
        ));
    }
    Ok(Dataset { manifest, model, samples })
}

fn count_clouds(dir: &PathBuf) -> Result<usize> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut n = 0;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().extension().is_some_and(|x| x == "ply") {
            n += 1;
        }
    }
    Ok(n)
}
