//! Transformer encoder whose blocks run multi-head self-attention and a
//! feature-space graph convolution side by side on the normalized tokens.

use alloc::format;

use serde::{Deserialize, Serialize};

use super::Trace;
use crate::autodiff::{init_linear, linear, IndexMatrix, ParamStore, PoolKind, Tape, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::geometry::sampling::knn_rows;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    /// Feature-space neighbors of the geometry-aware module.
    pub k_f: usize,
    /// Hidden width of the position-wise feedforward sub-block.
    pub ffn_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { layers: 3, heads: 4, k_f: 8, ffn_width: 256 }
    }
}

impl EncoderConfig {
    pub fn validate(&self, d: usize, tokens: usize) -> Result<()> {
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!("width {d} is not divisible by {} heads", self.heads)));
        }
        if self.ffn_width == 0 {
            return Err(Error::Config("ffn_width must be positive".into()));
        }
        if self.layers > 0 && (tokens < 2 || self.k_f == 0 || self.k_f >= tokens) {
            return Err(Error::Config(format!("need 1 <= k_f < N (k_f = {}, N = {tokens})", self.k_f)));
        }
        Ok(())
    }
}

pub fn init_encoder(store: &mut ParamStore, cfg: &EncoderConfig, d: usize, geometry_aware: bool) -> Result<()> {
    for l in 0..cfg.layers {
        let p = format!("encoder.{l}");
        for ln in ["ln1", "ln2"] {
            store.init_ones(&format!("{p}.{ln}.g"), &[d])?;
            store.init_zeros(&format!("{p}.{ln}.b"), &[d])?;
        }
        for m in ["q", "k", "v", "o"] {
            init_linear(store, &format!("{p}.attn.{m}"), d, d)?;
        }
        if geometry_aware {
            init_linear(store, &format!("{p}.geo"), 2 * d, d)?;
            init_linear(store, &format!("{p}.reduce"), 2 * d, d)?;
        } else {
            init_linear(store, &format!("{p}.reduce"), d, d)?;
        }
        init_linear(store, &format!("{p}.ffn.0"), d, cfg.ffn_width)?;
        init_linear(store, &format!("{p}.ffn.1"), cfg.ffn_width, d)?;
    }
    Ok(())
}

fn layer_norm(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.g"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    tape.layer_norm(x, g, b, LAYER_NORM_EPS)
}

/// Scaled dot-product self-attention over `x[N, d]` with `heads` heads,
/// projections `{prefix}.q/k/v/o`. Attention maps are pushed to
/// `trace.attention` when it is enabled.
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    heads: usize,
    trace: &mut Trace,
) -> Result<Var> {
    let d = tape.shape(x)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let q = linear(tape, store, &format!("{prefix}.q"), x)?;
    let k = linear(tape, store, &format!("{prefix}.k"), x)?;
    let v = linear(tape, store, &format!("{prefix}.v"), x)?;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut out: Option<Var> = None;
    for h in 0..heads {
        let qh = tape.slice_last(q, h * dh, dh)?;
        let kh = tape.slice_last(k, h * dh, dh)?;
        let vh = tape.slice_last(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let s = tape.scale(s, scale)?;
        let a = tape.softmax(s)?;
        if let Some(maps) = trace.attention.as_mut() {
            maps.push(tape.value(a).clone());
        }
        let oh = tape.matmul(a, vh)?;
        out = Some(match out {
            None => oh,
            Some(prev) => tape.concat(prev, oh)?,
        });
    }
    linear(tape, store, &format!("{prefix}.o"), out.unwrap())
}

/// Feature-space neighbor sets of `x[N, d]` (self excluded).
pub fn feature_neighbors(tape: &Tape, x: Var, k_f: usize) -> Result<IndexMatrix> {
    let s = tape.shape(x);
    knn_rows(tape.value(x).data(), s[0], s[1], k_f)
}

/// Graph convolution over the K-NN graph in feature space: edge
/// `x_i ⊕ (x_j − x_i)`, linear `2d → d` with relu, max over neighbors.
///
/// The linear map splits as `W_a x_i + W_b (x_j − x_i)`, so both halves are
/// applied per token and only the `[N, d]` projections are gathered.
pub fn geometry_aware_module(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var, k_f: usize) -> Result<Var> {
    let (n, d) = (tape.shape(x)[0], tape.shape(x)[1]);
    let nbrs = feature_neighbors(tape, x, k_f)?;
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    let wa = tape.slice_rows(w, 0, d)?;
    let wb = tape.slice_rows(w, d, d)?;
    let a = tape.matmul(x, wa)?;
    let bx = tape.matmul(x, wb)?;
    // per-center term W_a x_i − W_b x_i + bias, broadcast over neighbors
    let own = tape.sub(a, bx)?;
    let own = tape.add(own, b)?;
    let own = tape.gather_rows(own, &IndexMatrix::repeat_rows(n, k_f))?;
    let nb = tape.gather_rows(bx, &nbrs)?;
    let e = tape.add(own, nb)?;
    let e = tape.relu(e)?;
    tape.pool(e, PoolKind::Max)
}

/// Pre-norm block: `y = x + W_r (MHA(LN₁x) ⊕ GEO(LN₁x))`, then
/// `z = y + FFN(LN₂y)`. Without the geometry branch `W_r` maps `d → d`.
pub fn encoder_block(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    cfg: &EncoderConfig,
    geometry_aware: bool,
    trace: &mut Trace,
) -> Result<Var> {
    let h = layer_norm(tape, store, &format!("{prefix}.ln1"), x)?;
    let a = multi_head_attention(tape, store, &format!("{prefix}.attn"), h, cfg.heads, trace)?;
    let fused = if geometry_aware {
        let g = geometry_aware_module(tape, store, &format!("{prefix}.geo"), h, cfg.k_f)?;
        tape.concat(a, g)?
    } else {
        a
    };
    let r = linear(tape, store, &format!("{prefix}.reduce"), fused)?;
    let y = tape.add(x, r)?;
    let h2 = layer_norm(tape, store, &format!("{prefix}.ln2"), y)?;
    let f = linear(tape, store, &format!("{prefix}.ffn.0"), h2)?;
    let f = tape.relu(f)?;
    let f = linear(tape, store, &format!("{prefix}.ffn.1"), f)?;
    tape.add(y, f)
}

/// `L` stacked encoder blocks.
pub fn encode(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    cfg: &EncoderConfig,
    geometry_aware: bool,
    trace: &mut Trace,
) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 2 || (cfg.layers > 0 && s[0] < 2) {
        return Err(Error::Precondition(format!("encoder needs at least 2 tokens, got shape {s:?}")));
    }
    let mut h = x;
    for l in 0..cfg.layers {
        h = encoder_block(tape, store, &format!("encoder.{l}"), h, cfg, geometry_aware, trace)?;
    }
    Ok(h)
}

/// Max over tokens: `[N, d] → [d]`.
pub fn global_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::Precondition(format!("global_pool expects [N >= 1, d], got {s:?}")));
    }
    let r = tape.reshape(x, &[1, s[0], s[1]])?;
    let p = tape.pool(r, PoolKind::Max)?;
    tape.reshape(p, &[s[1]])
}

/// Largest deviation of any attention row sum from 1.
pub fn attention_rows_sum_error(maps: &[crate::autodiff::Tensor]) -> f64 {
    let mut worst = 0.0f64;
    for m in maps {
        let n = m.last_dim();
        for row in m.data().chunks(n) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    worst
}
