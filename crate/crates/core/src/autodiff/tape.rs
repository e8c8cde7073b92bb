//! Tape-based reverse-mode differentiation.
//!
//! Every op appends one node holding its forward value and whatever it needs
//! for the local gradient rule. Nodes are appended in evaluation order, so the
//! tape is topologically sorted by construction and `backward` is a single
//! reverse sweep.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into};
use super::{IndexMatrix, ParamStore, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Mean,
}

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a> {
    /// Normalize by the batch itself.
    Batch,
    /// Normalize by stored running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Batch mean and unbiased variance observed by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Var, Var, BinaryKind),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    Pool { x: Var, kind: PoolKind, k: usize, arg: Vec<usize> },
    Gather { x: Var, idx: Vec<usize> },
    Concat(Var, Var),
    Reshape(Var),
    Transpose(Var),
    SliceLast { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    RowNorm(Var),
    Normalize(Var),
    QuatToRot(Var),
}

impl Op {
    #[cfg_attr(not(debug_assertions), allow(dead_code))]
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Binary(..) => "elementwise",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Pool { .. } => "pool",
            Op::Gather { .. } => "gather_rows",
            Op::Concat(..) => "concat",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::SliceLast { .. } => "slice",
            Op::SliceRows { .. } => "slice_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowNorm(_) => "row_norm",
            Op::Normalize(_) => "normalize",
            Op::QuatToRot(_) => "quat_to_rot",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Parameters enter through [`Tape::param`], which
/// registers each store entry at most once per tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Result of a backward sweep.
pub struct Gradients {
    node_grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, Var>,
    /// Number of nodes whose gradient rule ran.
    pub nodes_visited: usize,
}

impl Gradients {
    /// Gradient with respect to any recorded node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.node_grads.get(v.0)?.as_deref()
    }

    /// Gradients of every registered parameter that was reached.
    pub fn params(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.params
            .iter()
            .filter_map(|(n, v)| self.node_grads[v.0].as_deref().map(|g| (n.as_str(), g)))
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).and_then(|v| self.wrt(*v))
    }

    /// Number of distinct parameters that received a gradient.
    pub fn params_touched(&self) -> usize {
        self.params().count()
    }

    /// Adds these gradients (times `scale`) into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore, scale: f64) -> Result<()> {
        for (name, g) in self.params() {
            store.accumulate_grad(name, g, scale)?;
        }
        Ok(())
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        #[cfg(debug_assertions)]
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that takes no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A free leaf that takes gradient (used by gradient checks and tests).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Registers a store entry on this tape. Repeated calls return the same
    /// node, so each parameter is a single leaf no matter how often it is used.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let p = store.get(name)?;
        let v = Var(self.nodes.len());
        self.nodes.push(Node { value: p.value.clone(), op: Op::Leaf, needs_grad: p.trainable });
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise op; equal shapes, or one shape a suffix of the other
    /// (broadcast along leading axes).
    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (big, small) = if sa.len() >= sb.len() { (sa, sb) } else { (sb, sa) };
        if !big.ends_with(small) {
            return dim_err("elementwise", format!("{sa:?} vs {sb:?}"));
        }
        let out_shape = big.to_vec();
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n = va.len().max(vb.len());
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let x = va[i % va.len()];
                let y = vb[i % vb.len()];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                }
            })
            .collect();
        self.push(Tensor::new(out_shape, out)?, Op::Binary(a, b, kind), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * s).collect();
        let t = Tensor::new(t.shape().to_vec(), out)?;
        self.push(t, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let t = Tensor::new(t.shape().to_vec(), out)?;
        self.push(t, Op::Relu(x), &[x])
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        if n == 0 {
            return dim_err("softmax", "empty last axis".to_string());
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - m);
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        self.push(t, Op::Softmax(x), &[x])
    }

    /// Per-token normalization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return dim_err(
                "layer_norm",
                format!("{:?} with gain {:?}", self.shape(x), self.shape(gain)),
            );
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xs.len() / d.max(1);
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(t, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias])
    }

    /// Column-wise normalization of `x[n, d]`. With [`NormStats::Batch`]
    /// the batch statistics are returned so the caller can update its
    /// running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let s = self.shape(x);
        if s.len() != 2 {
            return dim_err("batch_norm", format!("expected [n, d], got {s:?}"));
        }
        let (n, d) = (s[0], s[1]);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return dim_err("batch_norm", format!("gain {:?} for width {d}", self.shape(gain)));
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                if n < 2 {
                    return Err(Error::BatchSize(n));
                }
                let mut mean = vec![0.0; d];
                let mut var = vec![0.0; d];
                for r in 0..n {
                    for j in 0..d {
                        mean[j] += xs[r * d + j];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                for r in 0..n {
                    for j in 0..d {
                        let c = xs[r * d + j] - mean[j];
                        var[j] += c * c;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean, var, true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != d || var.len() != d {
                    return dim_err("batch_norm", format!("running stats for width {d}"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for r in 0..n {
            for j in 0..d {
                let h = (xs[r * d + j] - mean[j]) * inv_std[j];
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let observed = batch.then(|| BatchStats {
            var: var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect(),
            mean,
        });
        let t = Tensor::matrix(n, d, out)?;
        let v = self.push(
            t,
            Op::BatchNorm { x, gain, bias, xhat, inv_std, batch },
            &[x, gain, bias],
        )?;
        Ok((v, observed))
    }

    /// Reduces `x[n, k, d]` over `k`. Max pooling keeps the first index on ties.
    pub fn pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return dim_err("pool", format!("expected [n, k, d], got {s:?}"));
        }
        let (n, k, d) = (s[0], s[1], s[2]);
        if k == 0 {
            return Err(Error::EmptyNeighborhood);
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; n * d];
        let mut arg = Vec::new();
        match kind {
            PoolKind::Max => {
                arg = vec![0; n * d];
                for i in 0..n {
                    for c in 0..d {
                        let mut best = xs[i * k * d + c];
                        let mut bi = 0;
                        for j in 1..k {
                            let v = xs[(i * k + j) * d + c];
                            if v > best {
                                best = v;
                                bi = j;
                            }
                        }
                        out[i * d + c] = best;
                        arg[i * d + c] = bi;
                    }
                }
            }
            PoolKind::Mean => {
                for i in 0..n {
                    for j in 0..k {
                        let row = &xs[(i * k + j) * d..(i * k + j + 1) * d];
                        for (o, v) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v /= k as f64);
            }
        }
        let t = Tensor::matrix(n, d, out)?;
        self.push(t, Op::Pool { x, kind, k, arg }, &[x])
    }

    /// `out[i, j, :] = x[idx[i, j], :]` for `x[n, d]`.
    pub fn gather_rows(&mut self, x: Var, idx: &IndexMatrix) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return dim_err("gather_rows", format!("expected [n, d], got {s:?}"));
        }
        let (n, d) = (s[0], s[1]);
        if let Some(&bad) = idx.data().iter().find(|&&i| i >= n) {
            return Err(Error::Index { index: bad, len: n });
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(idx.data().len() * d);
        for &i in idx.data() {
            out.extend_from_slice(&xs[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![idx.rows(), idx.cols(), d], out)?;
        let op = Op::Gather { x, idx: idx.data().to_vec() };
        self.push(t, op, &[x])
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return dim_err("concat", format!("{sa:?} with {sb:?}"));
        }
        let (d1, d2) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = d1 + d2;
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (d1 + d2));
        for r in 0..rows {
            out.extend_from_slice(&va[r * d1..(r + 1) * d1]);
            out.extend_from_slice(&vb[r * d2..(r + 1) * d2]);
        }
        self.push(Tensor::new(shape, out)?, Op::Concat(a, b), &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        self.push(t, Op::Reshape(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return dim_err("transpose", format!("expected a matrix, got {s:?}"));
        }
        let (m, n) = (s[0], s[1]);
        let xs = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xs[i * n + j];
            }
        }
        self.push(Tensor::matrix(n, m, out)?, Op::Transpose(x), &[x])
    }

    /// `x[..., start..start + len]`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        let c = s.last().copied().unwrap_or(0);
        if start + len > c {
            return dim_err("slice", format!("{start}..{} of {c}", start + len));
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = len;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        self.push(Tensor::new(shape, out)?, Op::SliceLast { x, start }, &[x])
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[0] {
            return dim_err("slice_rows", format!("{start}..{} of {s:?}", start + len));
        }
        let c = s[1];
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        self.push(Tensor::matrix(len, c, out)?, Op::SliceRows { x, start }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return dim_err("mean", "empty tensor".to_string());
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Euclidean norm over the last axis: `[..., c] -> [...]`.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.last_dim();
        if c == 0 || t.rank() == 0 {
            return dim_err("row_norm", format!("{:?}", t.shape()));
        }
        let out = t
            .data()
            .chunks(c)
            .map(|r| libm::sqrt(r.iter().map(|v| v * v).sum::<f64>()))
            .collect();
        let shape = t.shape()[..t.rank() - 1].to_vec();
        self.push(Tensor::new(shape, out)?, Op::RowNorm(x), &[x])
    }

    /// `x / ‖x‖` over the whole tensor. Fails when `‖x‖ <= min_norm`.
    pub fn normalize(&mut self, x: Var, min_norm: f64) -> Result<Var> {
        let t = self.value(x);
        let norm = libm::sqrt(t.data().iter().map(|v| v * v).sum::<f64>());
        if !(norm > min_norm) {
            return Err(Error::DegenerateQuaternion(norm));
        }
        let out = t.data().iter().map(|v| v / norm).collect();
        let t = Tensor::new(t.shape().to_vec(), out)?;
        self.push(t, Op::Normalize(x), &[x])
    }

    /// Rotation matrix of a unit quaternion stored as `[q0, q1, q2, q3]`
    /// with `q = q3 + q0 i + q1 j + q2 k`.
    pub fn quat_to_rot(&mut self, q: Var) -> Result<Var> {
        if self.shape(q) != [4] {
            return dim_err("quat_to_rot", format!("expected [4], got {:?}", self.shape(q)));
        }
        let d = self.value(q).data();
        let r = crate::geometry::rot_entries([d[0], d[1], d[2], d[3]]);
        self.push(Tensor::matrix(3, 3, r.to_vec())?, Op::QuatToRot(q), &[q])
    }

    /// Runs the reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if !(ls.is_empty() || ls == [1]) {
            return Err(Error::NotScalar(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { node_grads: grads, params: self.params, nodes_visited: visited })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    matmul_nt_into(g, bv, acc(grads, *a, m * k), m, k, n);
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    matmul_tn_into(av, g, acc(grads, *b, k * n), m, k, n);
                }
            }
            Op::Binary(a, b, kind) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (la, lb) = (va.len(), vb.len());
                if self.wants(*a) {
                    let ga = acc(grads, *a, la);
                    for (i, gi) in g.iter().enumerate() {
                        ga[i % la] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => *gi,
                            BinaryKind::Mul => gi * vb[i % lb],
                        };
                    }
                }
                if self.wants(*b) {
                    let gb = acc(grads, *b, lb);
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % lb] += match kind {
                            BinaryKind::Add => *gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * va[i % la],
                        };
                    }
                }
            }
            Op::Scale(x, s) => {
                let gx = acc(grads, *x, g.len());
                for (o, gi) in gx.iter_mut().zip(g) {
                    *o += s * gi;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = acc(grads, *x, g.len());
                for ((o, gi), v) in gx.iter_mut().zip(g).zip(xv) {
                    if *v > 0.0 {
                        *o += gi;
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let gx = acc(grads, *x, g.len());
                for ((gr, yr), or) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        or[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = node.value.last_dim();
                let gv = self.value(*gain).data();
                if self.wants(*gain) {
                    let gg = acc(grads, *gain, d);
                    for (r, gr) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            gg[j] += gr[j] * xhat[r * d + j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = acc(grads, *bias, d);
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                }
                if self.wants(*x) {
                    let gx = acc(grads, *x, g.len());
                    let mut dh = vec![0.0; d];
                    for (r, gr) in g.chunks(d).enumerate() {
                        let h = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                        }
                        let m1 = dh.iter().sum::<f64>() / d as f64;
                        let m2 = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += inv_std[r] * (dh[j] - m1 - h[j] * m2);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gain, bias, xhat, inv_std, batch } => {
                let s = node.value.shape();
                let (n, d) = (s[0], s[1]);
                let gv = self.value(*gain).data();
                if self.wants(*gain) {
                    let gg = acc(grads, *gain, d);
                    for r in 0..n {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = acc(grads, *bias, d);
                    for r in 0..n {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if self.wants(*x) {
                    let gx = acc(grads, *x, g.len());
                    if *batch {
                        for j in 0..d {
                            let (mut m1, mut m2) = (0.0, 0.0);
                            for r in 0..n {
                                let dh = g[r * d + j] * gv[j];
                                m1 += dh;
                                m2 += dh * xhat[r * d + j];
                            }
                            m1 /= n as f64;
                            m2 /= n as f64;
                            for r in 0..n {
                                let dh = g[r * d + j] * gv[j];
                                gx[r * d + j] += inv_std[j] * (dh - m1 - xhat[r * d + j] * m2);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for j in 0..d {
                                gx[r * d + j] += g[r * d + j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            Op::Pool { x, kind, k, arg } => {
                let k = *k;
                let d = node.value.last_dim();
                let n = node.value.shape()[0];
                let gx = acc(grads, *x, n * k * d);
                match kind {
                    PoolKind::Max => {
                        for i in 0..n {
                            for c in 0..d {
                                gx[(i * k + arg[i * d + c]) * d + c] += g[i * d + c];
                            }
                        }
                    }
                    PoolKind::Mean => {
                        let w = 1.0 / k as f64;
                        for i in 0..n {
                            for j in 0..k {
                                for c in 0..d {
                                    gx[(i * k + j) * d + c] += g[i * d + c] * w;
                                }
                            }
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                let d = node.value.last_dim();
                let len = self.value(*x).len();
                let gx = acc(grads, *x, len);
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..d {
                        gx[src * d + c] += g[r * d + c];
                    }
                }
            }
            Op::Concat(a, b) => {
                let d1 = self.value(*a).last_dim();
                let d2 = self.value(*b).last_dim();
                let rows = g.len() / (d1 + d2).max(1);
                if self.wants(*a) {
                    let ga = acc(grads, *a, rows * d1);
                    for r in 0..rows {
                        for j in 0..d1 {
                            ga[r * d1 + j] += g[r * (d1 + d2) + j];
                        }
                    }
                }
                if self.wants(*b) {
                    let gb = acc(grads, *b, rows * d2);
                    for r in 0..rows {
                        for j in 0..d2 {
                            gb[r * d2 + j] += g[r * (d1 + d2) + d1 + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                let gx = acc(grads, *x, g.len());
                for (o, gi) in gx.iter_mut().zip(g) {
                    *o += gi;
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let (n, m) = (s[0], s[1]);
                let gx = acc(grads, *x, g.len());
                for j in 0..n {
                    for i in 0..m {
                        gx[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::SliceLast { x, start } => {
                let len = node.value.last_dim();
                let c = self.value(*x).last_dim();
                let total = self.value(*x).len();
                let gx = acc(grads, *x, total);
                for (r, gr) in g.chunks(len.max(1)).enumerate() {
                    for (j, gi) in gr.iter().enumerate() {
                        gx[r * c + start + j] += gi;
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.last_dim();
                let total = self.value(*x).len();
                let gx = acc(grads, *x, total);
                for (o, gi) in gx[start * c..start * c + g.len()].iter_mut().zip(g) {
                    *o += gi;
                }
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                acc(grads, *x, len).iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                let w = g[0] / len as f64;
                acc(grads, *x, len).iter_mut().for_each(|o| *o += w);
            }
            Op::RowNorm(x) => {
                let xv = self.value(*x).data();
                let c = self.value(*x).last_dim();
                let y = node.value.data();
                let gx = acc(grads, *x, xv.len());
                for (r, (&gi, &norm)) in g.iter().zip(y).enumerate() {
                    if norm > 0.0 {
                        for j in 0..c {
                            gx[r * c + j] += gi * xv[r * c + j] / norm;
                        }
                    }
                }
            }
            Op::Normalize(x) => {
                let xv = self.value(*x).data();
                let y = node.value.data();
                let norm = libm::sqrt(xv.iter().map(|v| v * v).sum::<f64>());
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                let gx = acc(grads, *x, xv.len());
                for j in 0..xv.len() {
                    gx[j] += (g[j] - y[j] * dot) / norm;
                }
            }
            Op::QuatToRot(q) => {
                let d = self.value(*q).data();
                let jac = crate::geometry::rot_jacobian([d[0], d[1], d[2], d[3]]);
                let gq = acc(grads, *q, 4);
                for (c, col) in jac.iter().enumerate() {
                    gq[c] += col.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }
}
