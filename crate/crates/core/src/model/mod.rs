//! The pose network: local feature extractor, geometry-aware transformer
//! encoder, global pooling and the decoupled pose head.

pub mod embed;
pub mod encoder;
pub mod head;

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, ParamStore, Tape, Tensor, BATCH_NORM_MOMENTUM};
use crate::error::{Error, Result};
use crate::geometry::{NormalField, PointCloud};

pub use embed::{EmbedConfig, FeatureEmbedding, PreparedCloud};
pub use encoder::EncoderConfig;
pub use head::{HeadConfig, PoseEstimate, PoseVars};

/// Local feature block flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    #[default]
    Gcn,
    Plainconv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    #[default]
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

/// Batch-norm statistics source for plain-conv blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Side outputs of a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// Train-mode batch statistics per plain-conv block prefix.
    pub batch_stats: Vec<(String, BatchStats)>,
    /// Attention maps, recorded only when `Some`.
    pub attention: Option<Vec<Tensor>>,
}

impl Trace {
    pub fn recording_attention() -> Self {
        Self { attention: Some(Vec::new()), ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed: EmbedConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub gcn_block: BlockKind,
    pub geometry_aware: Switch,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed: EmbedConfig::default(),
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            gcn_block: BlockKind::Gcn,
            geometry_aware: Switch::On,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.embed.validate()?;
        self.encoder.validate(self.embed.d_in, self.embed.final_centers())?;
        self.head.validate()?;
        if self.gcn_block == BlockKind::Plainconv && self.embed.center_counts().contains(&1) {
            return Err(Error::Config("plain-conv batch norm needs at least 2 centers per block".into()));
        }
        Ok(())
    }

    /// Fresh parameters; every tensor is a pure function of `(seed, name, shape)`.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut store = ParamStore::new(seed);
        embed::init_embed(&mut store, &self.embed, self.gcn_block)?;
        encoder::init_encoder(&mut store, &self.encoder, self.embed.d_in, self.geometry_aware.is_on())?;
        head::init_head(&mut store, &self.head, self.embed.d_in)?;
        Ok(store)
    }

    pub fn prepare(&self, pc: &PointCloud, normals: &NormalField) -> Result<PreparedCloud> {
        embed::prepare(pc, normals, &self.embed)
    }
}

/// Full forward pass on a prepared cloud.
pub fn forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    prep: &PreparedCloud,
    mode: Mode,
    trace: &mut Trace,
) -> Result<PoseVars> {
    let emb = embed::embed(tape, store, prep, &cfg.embed, cfg.gcn_block, mode, trace)?;
    let x = encoder::encode(tape, store, emb.features, &cfg.encoder, cfg.geometry_aware.is_on(), trace)?;
    let g = encoder::global_pool(tape, x)?;
    head::predict(tape, store, &cfg.head, g, &prep.barycenter, prep.length_scale)
}

/// Eval-mode prediction without gradients.
pub fn predict(store: &ParamStore, cfg: &ModelConfig, prep: &PreparedCloud) -> Result<PoseEstimate> {
    let mut tape = Tape::new();
    let mut trace = Trace::default();
    let v = forward(&mut tape, store, cfg, prep, Mode::Eval, &mut trace)?;
    PoseEstimate::from_vars(&tape, &v)
}

/// Folds train-mode batch statistics into the running buffers
/// (`new = (1 − m)·old + m·batch`).
pub fn update_running_stats(store: &mut ParamStore, stats: &[(String, BatchStats)]) -> Result<()> {
    let m = BATCH_NORM_MOMENTUM;
    for (prefix, s) in stats {
        for (suffix, vals) in [("mean", &s.mean), ("var", &s.var)] {
            let buf = store.value_mut(&alloc::format!("{prefix}.bn.{suffix}"))?;
            for (o, v) in buf.data_mut().iter_mut().zip(vals) {
                *o = (1.0 - m) * *o + m * v;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
