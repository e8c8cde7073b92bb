//! Local feature extractor: graph-convolution blocks over point-pair edges,
//! FPS downsampling between blocks, and a learnable positional encoding.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{BlockKind, Mode, Trace};
use crate::autodiff::{init_linear, linear, mlp2, IndexMatrix, NormStats, ParamStore, PoolKind, Tape, Tensor, Var};
use crate::autodiff::BATCH_NORM_EPS;
use crate::error::{Error, Result};
use crate::geometry::sampling::{fps_points, knn_of_indices};
use crate::geometry::{barycenter, fps, ppf, NormalField, PointCloud, Vec3};

/// Geometric edge width: four PPF components plus the 3D offset.
pub const EDGE_GEOM: usize = 7;
/// Per-point input width of a plain-conv block before prior features.
const POINT_GEOM: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    /// Points kept (by FPS) from the observed cloud before embedding.
    pub input_points: usize,
    pub n_initial_centers: usize,
    /// Neighborhood size per block.
    pub k_neighbors: Vec<usize>,
    /// Output width per block.
    pub widths: Vec<usize>,
    /// FPS factor between consecutive blocks (one fewer than blocks).
    pub downsample: Vec<usize>,
    pub d_in: usize,
    pub pool: PoolKind,
    /// Leave each center out of its own neighborhood.
    pub exclude_self: bool,
    /// Coordinates are centered on the barycenter and multiplied by this
    /// before entering the network.
    pub length_scale: f64,
    pub fps_seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            input_points: 256,
            n_initial_centers: 64,
            k_neighbors: alloc::vec![16, 8],
            widths: alloc::vec![64, 64],
            downsample: alloc::vec![2],
            d_in: 64,
            pool: PoolKind::Max,
            exclude_self: true,
            length_scale: 10.0,
            fps_seed: 0,
        }
    }
}

impl EmbedConfig {
    /// Center count of every block.
    pub fn center_counts(&self) -> Vec<usize> {
        let mut n = alloc::vec![self.n_initial_centers];
        for f in &self.downsample {
            let last = *n.last().unwrap();
            n.push(last.div_ceil((*f).max(1)));
        }
        n
    }

    pub fn final_centers(&self) -> usize {
        *self.center_counts().last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        let blocks = self.widths.len();
        let bad = |m: String| Err(Error::Config(m));
        if blocks == 0 {
            return bad("embed needs at least one block".into());
        }
        if self.k_neighbors.len() != blocks {
            return bad(format!("{} k_neighbors for {blocks} blocks", self.k_neighbors.len()));
        }
        if self.downsample.len() + 1 != blocks {
            return bad(format!("{} downsample factors for {blocks} blocks", self.downsample.len()));
        }
        if self.widths.contains(&0) || self.k_neighbors.contains(&0) || self.downsample.contains(&0) {
            return bad("embed widths, k_neighbors and downsample factors must be positive".into());
        }
        if self.d_in != self.widths[blocks - 1] {
            return bad(format!("d_in {} differs from last width {}", self.d_in, self.widths[blocks - 1]));
        }
        if self.n_initial_centers == 0 || self.n_initial_centers > self.input_points {
            return bad("need 1 <= n_initial_centers <= input_points".into());
        }
        let counts = self.center_counts();
        let mut avail = self.input_points;
        for (b, &k) in self.k_neighbors.iter().enumerate() {
            let cap = avail - usize::from(self.exclude_self);
            if k > cap {
                return bad(format!("block {b}: k = {k} exceeds the {cap} available neighbors"));
            }
            avail = counts[b];
        }
        if !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
            return bad("length_scale must be positive".into());
        }
        Ok(())
    }
}

/// Neighborhood structure of one block, independent of learned weights.
#[derive(Debug, Clone)]
pub struct Level {
    /// Points this block reads from (network frame) and their normals.
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    /// Indices into `points` of this block's centers, in FPS order.
    pub centers: Vec<usize>,
    /// `[N, k]` neighbor indices into `points`.
    pub nbrs: IndexMatrix,
    /// `[N * k, 7]` rows of `PPF ⊕ Δx`, edge `(i, j)` at row `i * k + j`.
    pub edges: Tensor,
}

impl Level {
    pub fn build(points: Vec<Vec3>, normals: Vec<Vec3>, centers: Vec<usize>, k: usize, exclude_self: bool) -> Result<Self> {
        let nbrs = knn_of_indices(&points, &centers, k, exclude_self)?;
        let mut edges = Vec::with_capacity(centers.len() * k * EDGE_GEOM);
        for (r, &c) in centers.iter().enumerate() {
            let (pi, ni) = (points[c], normals[c]);
            for &j in nbrs.row(r) {
                let (pj, nj) = (points[j], normals[j]);
                edges.extend_from_slice(&ppf(&pi, &ni, &pj, &nj));
                let d = pj - pi;
                edges.extend_from_slice(&[d.x, d.y, d.z]);
            }
        }
        let edges = Tensor::matrix(centers.len() * k, EDGE_GEOM, edges)?;
        Ok(Self { points, normals, centers, nbrs, edges })
    }

    pub fn k(&self) -> usize {
        self.nbrs.cols()
    }

    pub fn center_points(&self) -> Vec<Vec3> {
        self.centers.iter().map(|&c| self.points[c]).collect()
    }
}

/// A cloud reduced to the weight-independent inputs of the network.
#[derive(Debug, Clone)]
pub struct PreparedCloud {
    /// Barycenter of the observed cloud, camera frame, meters.
    pub barycenter: Vec3,
    pub length_scale: f64,
    pub levels: Vec<Level>,
}

impl PreparedCloud {
    /// Final centers in the camera frame.
    pub fn final_centers(&self) -> Vec<Vec3> {
        let lvl = self.levels.last().unwrap();
        lvl.center_points().iter().map(|p| p / self.length_scale + self.barycenter).collect()
    }
}

/// Subsamples to `input_points`, moves to barycentric network coordinates,
/// and builds every block's neighborhoods.
pub fn prepare(pc: &PointCloud, normals: &NormalField, cfg: &EmbedConfig) -> Result<PreparedCloud> {
    if normals.len() != pc.len() {
        return Err(Error::Precondition(format!("{} normals for {} points", normals.len(), pc.len())));
    }
    if pc.len() < cfg.n_initial_centers {
        return Err(Error::Count { requested: cfg.n_initial_centers, available: pc.len() });
    }
    let keep: Vec<usize> = if pc.len() > cfg.input_points {
        fps(pc, cfg.input_points, cfg.fps_seed)?
    } else {
        (0..pc.len()).collect()
    };
    let xbar = barycenter(pc);
    let s = cfg.length_scale;
    let mut points: Vec<Vec3> = keep.iter().map(|&i| (pc.points()[i] - xbar) * s).collect();
    let mut nrm: Vec<Vec3> = keep.iter().map(|&i| normals.normals()[i]).collect();
    let counts = cfg.center_counts();
    let mut levels = Vec::with_capacity(counts.len());
    for (b, &n) in counts.iter().enumerate() {
        let centers = fps_points(&points, n, cfg.fps_seed)?;
        let lvl = Level::build(points, nrm, centers, cfg.k_neighbors[b], cfg.exclude_self)?;
        points = lvl.center_points();
        nrm = lvl.centers.iter().map(|&c| lvl.normals[c]).collect();
        levels.push(lvl);
    }
    Ok(PreparedCloud { barycenter: xbar, length_scale: s, levels })
}

/// Centers and features after the extractor (`F_emb = F_pos + F_geo`).
#[derive(Debug, Clone)]
pub struct FeatureEmbedding {
    /// Network-frame center coordinates.
    pub centers: Vec<Vec3>,
    /// `[N, d_in]`.
    pub features: Var,
    /// `[N, d_in]` geometric part before the positional code is added.
    pub geo: Var,
}

fn block_prefix(b: usize) -> String {
    format!("embed.b{b}")
}

pub fn init_embed(store: &mut ParamStore, cfg: &EmbedConfig, kind: BlockKind) -> Result<()> {
    let mut prev = 0;
    for (b, &w) in cfg.widths.iter().enumerate() {
        let p = block_prefix(b);
        match kind {
            BlockKind::Gcn => {
                init_linear(store, &format!("{p}.mlp.0"), EDGE_GEOM + prev, w)?;
                init_linear(store, &format!("{p}.mlp.1"), w, w)?;
            }
            BlockKind::Plainconv => {
                init_linear(store, &format!("{p}.conv"), POINT_GEOM + prev, w)?;
                store.init_ones(&format!("{p}.bn.gain"), &[w])?;
                store.init_zeros(&format!("{p}.bn.bias"), &[w])?;
                store.init_buffer(&format!("{p}.bn.mean"), Tensor::zeros(&[w]))?;
                store.init_buffer(&format!("{p}.bn.var"), Tensor::filled(&[w], 1.0))?;
            }
        }
        prev = w;
    }
    init_linear(store, "pos_enc.0", 3, cfg.d_in)?;
    init_linear(store, "pos_enc.1", cfg.d_in, cfg.d_in)
}

/// One graph-convolution block. Every edge `(p_i, p_ij)` carries
/// `PPF ⊕ Δx ⊕ f_ij`; a shared two-layer MLP maps edges to `width` and the
/// neighborhood is pooled onto its center. Returns `[N, width]`.
///
/// The first MLP layer is linear in the edge vector, so its neighbor-feature
/// rows are applied once per point and then gathered, rather than once per
/// edge.
pub fn graph_conv_block(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    level: &Level,
    in_feats: Option<Var>,
    pool: PoolKind,
) -> Result<Var> {
    let (n, k) = (level.centers.len(), level.k());
    if k == 0 {
        return Err(Error::EmptyNeighborhood);
    }
    let w0 = tape.param(store, &format!("{prefix}.mlp.0.w"))?;
    let b0 = tape.param(store, &format!("{prefix}.mlp.0.b"))?;
    let width = tape.shape(w0)[1];
    let fin = tape.shape(w0)[0] - EDGE_GEOM;
    let edges = tape.constant(level.edges.clone());
    let wg = tape.slice_rows(w0, 0, EDGE_GEOM)?;
    let mut h = tape.matmul(edges, wg)?;
    match in_feats {
        Some(f) => {
            let rows = tape.shape(f).to_vec();
            if rows != [level.points.len(), fin] {
                return Err(Error::Dimension { op: "graph_conv_block", detail: format!("features {rows:?}, expected [{}, {fin}]", level.points.len()) });
            }
            let wf = tape.slice_rows(w0, EDGE_GEOM, fin)?;
            let proj = tape.matmul(f, wf)?;
            let g = tape.gather_rows(proj, &level.nbrs)?;
            let g = tape.reshape(g, &[n * k, width])?;
            h = tape.add(h, g)?;
        }
        None if fin != 0 => {
            return Err(Error::Dimension { op: "graph_conv_block", detail: format!("block expects {fin} input features") });
        }
        None => {}
    }
    let h = tape.add(h, b0)?;
    let h = tape.relu(h)?;
    let h = linear(tape, store, &format!("{prefix}.mlp.1"), h)?;
    let h = tape.reshape(h, &[n, k, width])?;
    tape.pool(h, pool)
}

/// Ablation stand-in for [`graph_conv_block`]: Linear, BatchNorm and ReLU
/// applied to each center's own `xyz ⊕ normal ⊕ f_i`, no neighborhood.
pub fn plain_conv_block(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    level: &Level,
    in_feats: Option<Var>,
    mode: Mode,
    trace: &mut Trace,
) -> Result<Var> {
    let n = level.centers.len();
    let mut geo = Vec::with_capacity(n * POINT_GEOM);
    for &c in &level.centers {
        let (p, nr) = (level.points[c], level.normals[c]);
        geo.extend_from_slice(&[p.x, p.y, p.z, nr.x, nr.y, nr.z]);
    }
    let mut x = tape.constant(Tensor::matrix(n, POINT_GEOM, geo)?);
    if let Some(f) = in_feats {
        let idx = IndexMatrix::column(&level.centers);
        let g = tape.gather_rows(f, &idx)?;
        let d = tape.shape(f)[1];
        let g = tape.reshape(g, &[n, d])?;
        x = tape.concat(x, g)?;
    }
    let h = linear(tape, store, &format!("{prefix}.conv"), x)?;
    let gain = tape.param(store, &format!("{prefix}.bn.gain"))?;
    let bias = tape.param(store, &format!("{prefix}.bn.bias"))?;
    let (mean_name, var_name) = (format!("{prefix}.bn.mean"), format!("{prefix}.bn.var"));
    let (y, stats) = match mode {
        Mode::Train => tape.batch_norm(h, gain, bias, NormStats::Batch, BATCH_NORM_EPS)?,
        Mode::Eval => {
            let mean = store.value(&mean_name)?.data();
            let var = store.value(&var_name)?.data();
            tape.batch_norm(h, gain, bias, NormStats::Running { mean, var }, BATCH_NORM_EPS)?
        }
    };
    if let Some(s) = stats {
        trace.batch_stats.push((String::from(prefix), s));
    }
    tape.relu(y)
}

/// Learnable positional code `Φ(p_i)`: MLP `3 → d_in → d_in`.
pub fn positional_encoding(tape: &mut Tape, store: &ParamStore, centers: &[Vec3]) -> Result<Var> {
    let data = centers.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    let x = tape.constant(Tensor::matrix(centers.len(), 3, data)?);
    mlp2(tape, store, "pos_enc", x)
}

/// Runs the extractor over prepared levels.
pub fn embed(
    tape: &mut Tape,
    store: &ParamStore,
    prep: &PreparedCloud,
    cfg: &EmbedConfig,
    kind: BlockKind,
    mode: Mode,
    trace: &mut Trace,
) -> Result<FeatureEmbedding> {
    let mut feats: Option<Var> = None;
    for (b, lvl) in prep.levels.iter().enumerate() {
        let p = block_prefix(b);
        let f = match kind {
            BlockKind::Gcn => graph_conv_block(tape, store, &p, lvl, feats, cfg.pool)?,
            BlockKind::Plainconv => plain_conv_block(tape, store, &p, lvl, feats, mode, trace)?,
        };
        feats = Some(f);
    }
    let geo = feats.ok_or_else(|| Error::Config("embed needs at least one block".into()))?;
    let centers = prep.levels.last().unwrap().center_points();
    let pos = positional_encoding(tape, store, &centers)?;
    let features = tape.add(geo, pos)?;
    Ok(FeatureEmbedding { centers, features, geo })
}

/// FPS over current centers keeping `⌈N / factor⌉`, with features gathered
/// at the survivors (kept in FPS order).
pub fn fps_downsample(
    tape: &mut Tape,
    centers: &[Vec3],
    features: Var,
    factor: usize,
    seed: u64,
) -> Result<(Vec<usize>, Var)> {
    if factor == 0 {
        return Err(Error::Count { requested: 0, available: centers.len() });
    }
    let keep = fps_points(centers, centers.len().div_ceil(factor), seed)?;
    let g = tape.gather_rows(features, &IndexMatrix::column(&keep))?;
    let d = tape.shape(features)[1];
    let g = tape.reshape(g, &[keep.len(), d])?;
    Ok((keep, g))
}
