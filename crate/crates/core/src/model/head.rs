//! Decoupled translation / rotation branches and the training loss.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{init_linear, linear, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, UnitQuaternion, Vec3, QUAT_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Hidden widths shared by both branches.
    pub hidden: Vec<usize>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: alloc::vec![128, 64] }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::Config("head widths must be positive".into()));
        }
        Ok(())
    }
}

pub fn init_head(store: &mut ParamStore, cfg: &HeadConfig, d: usize) -> Result<()> {
    for (branch, out) in [("head.t", 3), ("head.r", 4)] {
        let mut prev = d;
        for (i, &w) in cfg.hidden.iter().enumerate() {
            init_linear(store, &format!("{branch}.{i}"), prev, w)?;
            prev = w;
        }
        init_linear(store, &format!("{branch}.{}", cfg.hidden.len()), prev, out)?;
    }
    Ok(())
}

fn branch(tape: &mut Tape, store: &ParamStore, prefix: &str, layers: usize, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        h = linear(tape, store, &format!("{prefix}.{i}"), h)?;
        if i + 1 < layers {
            h = tape.relu(h)?;
        }
    }
    let n = tape.shape(h)[1];
    tape.reshape(h, &[n])
}

/// Tape handles of one prediction.
#[derive(Debug, Clone, Copy)]
pub struct PoseVars {
    /// Translation offset from the barycenter, network units.
    pub delta: Var,
    /// Unnormalized rotation output `[4]`.
    pub raw_q: Var,
    pub q: Var,
    /// `[3, 3]`.
    pub rot: Var,
    /// Camera-frame translation in meters, `[3]`.
    pub t: Var,
}

/// Both branches on the pooled feature `g[d]`: `t̂ = X̄ + δ / s` and
/// `R̂ = R(q / ‖q‖)`.
pub fn predict(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &HeadConfig,
    g: Var,
    barycenter: &Vec3,
    length_scale: f64,
) -> Result<PoseVars> {
    let d = tape.shape(g)[0];
    let x = tape.reshape(g, &[1, d])?;
    let layers = cfg.hidden.len() + 1;
    let delta = branch(tape, store, "head.t", layers, x)?;
    let raw_q = branch(tape, store, "head.r", layers, x)?;
    let q = tape.normalize(raw_q, QUAT_EPS)?;
    let rot = tape.quat_to_rot(q)?;
    let xbar = tape.constant(Tensor::vector(alloc::vec![barycenter.x, barycenter.y, barycenter.z]));
    let off = tape.scale(delta, 1.0 / length_scale)?;
    let t = tape.add(xbar, off)?;
    Ok(PoseVars { delta, raw_q, q, rot, t })
}

/// Predicted pose in plain values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEstimate {
    pub rotation: UnitQuaternion,
    pub translation: Vec3,
}

impl PoseEstimate {
    pub fn from_vars(tape: &Tape, v: &PoseVars) -> Result<Self> {
        let q = tape.value(v.q).data();
        let t = tape.value(v.t).data();
        Ok(Self {
            rotation: UnitQuaternion::normalize([q[0], q[1], q[2], q[3]])?,
            translation: Vec3::new(t[0], t[1], t[2]),
        })
    }

    pub fn transform(&self) -> RigidTransform {
        RigidTransform::from_quat(&self.rotation, self.translation)
    }
}

/// Vertices at a uniform stride, at most `n` of them.
pub fn loss_points(vertices: &[Vec3], n: usize) -> Vec<Vec3> {
    if n == 0 || vertices.is_empty() {
        return Vec::new();
    }
    if n >= vertices.len() {
        return vertices.to_vec();
    }
    (0..n).map(|i| vertices[i * vertices.len() / n]).collect()
}

fn rows(points: &[Vec3]) -> Result<Tensor> {
    Tensor::matrix(points.len(), 3, points.iter().flat_map(|p| [p.x, p.y, p.z]).collect())
}

/// Differentiable average distance between the model points under the
/// predicted and true poses. Asymmetric objects pair vertices by identity;
/// symmetric objects pair every predicted point with its closest true
/// point, the pairing recomputed from the current forward values.
pub fn pose_loss(tape: &mut Tape, pose: &PoseVars, gt: &RigidTransform, points: &[Vec3], symmetric: bool) -> Result<Var> {
    if points.is_empty() {
        return Err(Error::Precondition("pose loss needs at least one model point".into()));
    }
    let x = tape.constant(rows(points)?);
    let rt = tape.transpose(pose.rot)?;
    let p = tape.matmul(x, rt)?;
    let p = tape.add(p, pose.t)?;
    let truth: Vec<Vec3> = points.iter().map(|v| gt.apply(v)).collect();
    let target = if symmetric {
        let pv = tape.value(p).data();
        let matched: Vec<Vec3> = pv
            .chunks(3)
            .map(|r| {
                let q = Vec3::new(r[0], r[1], r[2]);
                let mut best = (f64::INFINITY, 0);
                for (j, g) in truth.iter().enumerate() {
                    let d = (g - q).norm_squared();
                    if d < best.0 {
                        best = (d, j);
                    }
                }
                truth[best.1]
            })
            .collect();
        rows(&matched)?
    } else {
        rows(&truth)?
    };
    let target = tape.constant(target);
    let diff = tape.sub(p, target)?;
    let dist = tape.row_norm(diff)?;
    tape.mean(dist)
}
