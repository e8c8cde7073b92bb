//! Mini-batch training with per-sample tapes and Adam.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_lr, Adam, ParamStore, Tape};
use crate::data::{random_rotation, ObjectModel, Sample};
use crate::error::{Error, Result};
use crate::geometry::{NormalField, PointCloud, RigidTransform, Vec3};
use crate::metrics::{evaluate_poses, MetricReport};
use crate::model::head::{loss_points, pose_loss};
use crate::model::{forward, predict, update_running_stats, Mode, ModelConfig, PreparedCloud, Trace};
use crate::rng::{mix, stream_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Model vertices used by the loss.
    pub loss_points: usize,
    /// Rotate each drawn training sample about its barycenter by a fresh
    /// random rotation.
    pub augment_rotation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 8, lr: 1e-3, loss_points: 64, augment_rotation: false }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.loss_points == 0 {
            return Err(Error::Config("batch and loss_points must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// A prepared network input with its ground truth.
#[derive(Debug, Clone)]
pub struct Example {
    pub prep: PreparedCloud,
    pub gt: RigidTransform,
}

impl Example {
    pub fn new(cfg: &ModelConfig, cloud: &PointCloud, normals: &NormalField, gt: RigidTransform) -> Result<Self> {
        Ok(Self { prep: cfg.prepare(cloud, normals)?, gt })
    }
}

/// Rotates a sample about its barycenter by `q`, adjusting the ground truth
/// so the object-to-camera relation is preserved.
pub fn rotate_about_barycenter(sample: &Sample, rot: &RigidTransform) -> Result<Sample> {
    let c = sample.cloud.barycenter();
    let r = rot.rotation;
    let pts: Vec<Vec3> = sample.cloud.points().iter().map(|p| r * (p - c) + c).collect();
    let mut normals = sample.normals.rotated(&r);
    normals.degenerate = sample.normals.degenerate;
    let gt_q = rot.quaternion().mul(&sample.gt_q);
    let gt = RigidTransform::from_quat(&gt_q, r * (sample.gt.translation - c) + c);
    Ok(Sample { cloud: PointCloud::new(pts)?, normals, gt, gt_q, model_ref: sample.model_ref.clone() })
}

/// Loss context shared by every step.
pub struct LossSpec {
    pub points: Vec<Vec3>,
    pub symmetric: bool,
}

impl LossSpec {
    pub fn new(model: &ObjectModel, n: usize) -> Self {
        Self { points: loss_points(&model.vertices, n), symmetric: model.symmetric }
    }
}

/// Forward + backward of one example. Gradients are added to the store
/// scaled by `weight`; the unscaled loss is returned.
pub fn accumulate_example(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    ex: &Example,
    loss: &LossSpec,
    weight: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut trace = Trace::default();
    let pose = forward(&mut tape, store, cfg, &ex.prep, Mode::Train, &mut trace)?;
    let l = pose_loss(&mut tape, &pose, &ex.gt, &loss.points, loss.symmetric)?;
    let value = tape.value(l).data()[0];
    let grads = tape.backward(l)?;
    grads.accumulate_into(store, weight)?;
    update_running_stats(store, &trace.batch_stats)?;
    Ok(value)
}

/// Mean loss over `batch`, one gradient step. Samples are processed in
/// order so the result does not depend on scheduling.
pub fn train_step(
    store: &mut ParamStore,
    opt: &mut Adam,
    cfg: &ModelConfig,
    batch: &[Example],
    loss: &LossSpec,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    store.zero_grads();
    let w = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for ex in batch {
        total += accumulate_example(store, cfg, ex, loss, w)?;
    }
    opt.step(store)?;
    Ok(total * w)
}

/// Forward-only loss of one example at the current parameters.
pub fn example_loss(store: &ParamStore, cfg: &ModelConfig, ex: &Example, loss: &LossSpec) -> Result<f64> {
    let mut tape = Tape::new();
    let mut trace = Trace::default();
    let pose = forward(&mut tape, store, cfg, &ex.prep, Mode::Eval, &mut trace)?;
    let l = pose_loss(&mut tape, &pose, &ex.gt, &loss.points, loss.symmetric)?;
    Ok(tape.value(l).data()[0])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Draws batches from `samples` (reshuffled each epoch), optionally
/// augmented, and trains for `tcfg.steps` steps. `on_step` sees each step's
/// mean loss.
pub fn train(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    samples: &[Sample],
    model: &ObjectModel,
    seed: u64,
    mut on_step: impl FnMut(StepLog),
) -> Result<()> {
    tcfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Precondition("no training samples".into()));
    }
    let loss = LossSpec::new(model, tcfg.loss_points);
    let cached: Vec<Example> = if tcfg.augment_rotation {
        Vec::new()
    } else {
        samples.iter().map(|s| Example::new(cfg, &s.cloud, &s.normals, s.gt)).collect::<Result<_>>()?
    };
    let mut opt = Adam::new(tcfg.lr);
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let mut cursor = 0;
    for step in 0..tcfg.steps {
        let mut batch = Vec::with_capacity(tcfg.batch);
        for slot in 0..tcfg.batch {
            if cursor == order.len() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut stream_rng(mix(seed, 0x5348_5546), epoch));
                epoch += 1;
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let ex = if tcfg.augment_rotation {
                let draw = (step * tcfg.batch + slot) as u64;
                let q = random_rotation(&mut stream_rng(mix(seed, 0x4155_4721), draw));
                let s = rotate_about_barycenter(&samples[i], &RigidTransform::from_quat(&q, Vec3::zeros()))?;
                Example::new(cfg, &s.cloud, &s.normals, s.gt)?
            } else {
                cached[i].clone()
            };
            batch.push(ex);
        }
        opt.lr = cosine_lr(tcfg.lr, step, tcfg.steps);
        let l = train_step(store, &mut opt, cfg, &batch, &loss)?;
        if !l.is_finite() {
            return Err(Error::Diverged { step });
        }
        on_step(StepLog { step, loss: l, lr: opt.lr });
    }
    Ok(())
}

/// Predicts every sample and scores against the model's full vertex set.
/// `ids` label the report rows.
pub fn evaluate(
    store: &ParamStore,
    cfg: &ModelConfig,
    samples: &[Sample],
    ids: &[usize],
    model: &ObjectModel,
) -> Result<MetricReport> {
    let mut pairs = Vec::with_capacity(samples.len());
    for (s, &id) in samples.iter().zip(ids) {
        let prep = cfg.prepare(&s.cloud, &s.normals)?;
        let pred = predict(store, cfg, &prep)?;
        pairs.push((id, pred.transform(), s.gt));
    }
    Ok(evaluate_poses(&pairs, &model.vertices, model.diameter, model.symmetric))
}

/// Scores ground truth against itself, for the oracle path.
pub fn evaluate_oracle(samples: &[Sample], ids: &[usize], model: &ObjectModel) -> MetricReport {
    let pairs: Vec<_> = samples.iter().zip(ids).map(|(s, &id)| (id, s.gt, s.gt)).collect();
    evaluate_poses(&pairs, &model.vertices, model.diameter, model.symmetric)
}
