use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::Vector3;
use rand::Rng as _;

use super::embed::{self, fps_downsample, graph_conv_block, positional_encoding, Level};
use super::encoder::{self, encode, encoder_block, feature_neighbors, geometry_aware_module, global_pool, multi_head_attention};
use super::head::{self, loss_points, pose_loss, PoseEstimate};
use super::*;
use crate::autodiff::gradcheck::{check_inputs, check_params};
use crate::autodiff::{IndexMatrix, ParamStore, PoolKind, Tape, Tensor, Var};
use crate::data::{builtin_model, gen_sample, random_rotation, ObjectModel, SceneConfig};
use crate::geometry::sampling::fps_points;
use crate::geometry::{normalize_quat, RigidTransform, UnitQuaternion, Vec3};
use crate::rng::stream_rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        embed: EmbedConfig {
            input_points: 64,
            n_initial_centers: 16,
            k_neighbors: vec![6, 4],
            widths: vec![16, 16],
            downsample: vec![2],
            d_in: 16,
            ..EmbedConfig::default()
        },
        encoder: EncoderConfig { layers: 1, heads: 2, k_f: 3, ffn_width: 32 },
        head: HeadConfig { hidden: vec![16, 8] },
        ..ModelConfig::default()
    }
}

fn lbracket() -> ObjectModel {
    builtin_model("Lbracket").unwrap()
}

fn sample(index: usize) -> crate::data::Sample {
    gen_sample(&lbracket(), &SceneConfig::default(), index).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream_rng(seed, 77);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn probe(tape: &mut Tape, y: Var) -> crate::error::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(random(&shape, 4242));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn random_points(n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = stream_rng(seed, 5);
    (0..n).map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()
}

fn random_normals(n: usize, seed: u64) -> Vec<Vec3> {
    random_points(n, seed ^ 0xff).into_iter().map(|v| v.normalize()).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn full_forward(store: &ParamStore, cfg: &ModelConfig, prep: &PreparedCloud) -> PoseEstimate {
    predict(store, cfg, prep).unwrap()
}

// ---- embedding ----

#[test]
fn default_embedding_shape() {
    let cfg = ModelConfig::default();
    let store = cfg.init_params(3).unwrap();
    let s = sample(0);
    let prep = cfg.prepare(&s.cloud, &s.normals).unwrap();
    assert_eq!(prep.levels[0].points.len(), 256);
    assert_eq!(prep.levels[0].centers.len(), 64);
    assert_eq!(prep.levels[1].points.len(), 64);
    let mut tape = Tape::new();
    let emb = embed::embed(&mut tape, &store, &prep, &cfg.embed, BlockKind::Gcn, Mode::Eval, &mut Trace::default()).unwrap();
    assert_eq!(tape.shape(emb.features), &[32, 64]);
    assert_eq!(emb.centers.len(), 32);
}

#[test]
fn zero_positional_code_leaves_geometric_features() {
    let cfg = tiny();
    let mut store = cfg.init_params(4).unwrap();
    store.zero_prefix("pos_enc");
    let s = sample(1);
    let prep = cfg.prepare(&s.cloud, &s.normals).unwrap();
    let mut tape = Tape::new();
    let emb = embed::embed(&mut tape, &store, &prep, &cfg.embed, BlockKind::Gcn, Mode::Eval, &mut Trace::default()).unwrap();
    assert_eq!(tape.value(emb.features), tape.value(emb.geo));
}

#[test]
fn single_edge_block_is_mlp_of_that_edge() {
    let pts = random_points(10, 1);
    let nrm = random_normals(10, 2);
    let lvl = Level::build(pts.clone(), nrm.clone(), vec![0, 3, 7], 1, true).unwrap();
    let mut store = ParamStore::new(9);
    crate::autodiff::init_linear(&mut store, "b.mlp.0", 7, 5).unwrap();
    crate::autodiff::init_linear(&mut store, "b.mlp.1", 5, 5).unwrap();
    // nonzero biases so they are exercised
    store.value_mut("b.mlp.0.b").unwrap().data_mut().copy_from_slice(&[0.1, -0.2, 0.3, 0.0, 0.05]);
    let mut tape = Tape::new();
    let out = graph_conv_block(&mut tape, &store, "b", &lvl, None, PoolKind::Max).unwrap();
    let w0 = store.value("b.mlp.0.w").unwrap();
    let b0 = store.value("b.mlp.0.b").unwrap().data();
    let w1 = store.value("b.mlp.1.w").unwrap();
    let b1 = store.value("b.mlp.1.b").unwrap().data();
    for (r, &c) in [0usize, 3, 7].iter().enumerate() {
        let j = lvl.nbrs.row(r)[0];
        assert_ne!(j, c);
        let f = crate::geometry::ppf(&pts[c], &nrm[c], &pts[j], &nrm[j]);
        let d = pts[j] - pts[c];
        let e = Tensor::matrix(1, 7, vec![f[0], f[1], f[2], f[3], d.x, d.y, d.z]).unwrap();
        let h: Vec<f64> = e.matmul(w0).unwrap().data().iter().zip(b0).map(|(a, b)| (a + b).max(0.0)).collect();
        let y = Tensor::matrix(1, 5, h).unwrap().matmul(w1).unwrap();
        let y: Vec<f64> = y.data().iter().zip(b1).map(|(a, b)| a + b).collect();
        assert!(max_abs_diff(&y, tape.value(out).row(r)) < 1e-14);
    }
}

#[test]
fn block_is_invariant_to_neighbor_order() {
    let pts = random_points(20, 3);
    let nrm = random_normals(20, 4);
    let lvl = Level::build(pts, nrm, vec![0, 5, 9, 13], 5, true).unwrap();
    let mut shuffled = lvl.clone();
    let k = lvl.k();
    let mut idx = Vec::new();
    let mut edges = Vec::new();
    for r in 0..4 {
        for j in (0..k).rev() {
            idx.push(lvl.nbrs.row(r)[j]);
            edges.extend_from_slice(lvl.edges.row(r * k + j));
        }
    }
    shuffled.nbrs = IndexMatrix::new(4, k, idx).unwrap();
    shuffled.edges = Tensor::matrix(4 * k, 7, edges).unwrap();
    let mut store = ParamStore::new(1);
    crate::autodiff::init_linear(&mut store, "b.mlp.0", 7 + 3, 8).unwrap();
    crate::autodiff::init_linear(&mut store, "b.mlp.1", 8, 8).unwrap();
    let feats = random(&[20, 3], 8);
    let run = |l: &Level| {
        let mut tape = Tape::new();
        let f = tape.constant(feats.clone());
        let o = graph_conv_block(&mut tape, &store, "b", l, Some(f), PoolKind::Max).unwrap();
        tape.value(o).clone()
    };
    assert_eq!(run(&lvl), run(&shuffled));
}

#[test]
fn graph_conv_block_gradcheck() {
    let pts = random_points(16, 5);
    let nrm = random_normals(16, 6);
    let lvl = Level::build(pts, nrm, vec![0, 4, 8, 12], 3, true).unwrap();
    let mut store = ParamStore::new(2);
    crate::autodiff::init_linear(&mut store, "b.mlp.0", 7 + 4, 6).unwrap();
    crate::autodiff::init_linear(&mut store, "b.mlp.1", 6, 6).unwrap();
    let feats = random(&[16, 4], 9);
    for kind in [PoolKind::Max, PoolKind::Mean] {
        let r = check_params(&store, None, 1e-5, 1, |t, s| {
            let f = t.constant(feats.clone());
            let o = graph_conv_block(t, s, "b", &lvl, Some(f), kind)?;
            probe(t, o)
        })
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
        let r = check_inputs(&[feats.clone()], 1e-5, |t, v| {
            let o = graph_conv_block(t, &store, "b", &lvl, Some(v[0]), kind)?;
            probe(t, o)
        })
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }
}

#[test]
fn fps_downsample_matches_fps_and_gather() {
    let centers = random_points(64, 11);
    let feats = random(&[64, 5], 12);
    let mut tape = Tape::new();
    let f = tape.constant(feats.clone());
    let (keep, g) = fps_downsample(&mut tape, &centers, f, 4, 0).unwrap();
    assert_eq!(keep, fps_points(&centers, 16, 0).unwrap());
    for (r, &i) in keep.iter().enumerate() {
        assert_eq!(tape.value(g).row(r), feats.row(i));
    }
    let (all, _) = fps_downsample(&mut tape, &centers, f, 1, 0).unwrap();
    let mut sorted = all.clone();
    sorted.sort();
    assert_eq!(sorted, (0..64).collect::<Vec<_>>());
    let (one, g1) = fps_downsample(&mut tape, &centers, f, 64, 5).unwrap();
    assert_eq!(one, vec![5]);
    assert_eq!(tape.value(g1).row(0), feats.row(5));
}

#[test]
fn positional_encoding_examples() {
    let cfg = tiny();
    let mut store = cfg.init_params(5).unwrap();
    let p = Vector3::new(0.3, -0.2, 0.1);
    let centers = vec![p, Vector3::new(1.0, 0.0, 0.0), p];
    let mut tape = Tape::new();
    let e = positional_encoding(&mut tape, &store, &centers).unwrap();
    assert_eq!(tape.value(e).row(0), tape.value(e).row(2));
    assert_ne!(tape.value(e).row(0), tape.value(e).row(1));
    store.zero_prefix("pos_enc");
    let mut tape = Tape::new();
    let e = positional_encoding(&mut tape, &store, &centers).unwrap();
    assert!(tape.value(e).data().iter().all(|v| *v == 0.0));

    let store = cfg.init_params(6).unwrap();
    let r = check_params(&store, Some(&["pos_enc.0.w", "pos_enc.0.b", "pos_enc.1.w", "pos_enc.1.b"]), 1e-5, 1, |t, s| {
        let e = positional_encoding(t, s, &centers)?;
        probe(t, e)
    })
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn first_block_ppf_edges_are_rigid_invariant() {
    let cfg = ModelConfig::default();
    let store = cfg.init_params(2).unwrap();
    let s = sample(2);
    let q = normalize_quat([0.3, -0.5, 0.2, 0.7]).unwrap();
    let t = RigidTransform::from_quat(&q, Vector3::new(0.05, -0.02, 0.1));
    let moved = s.cloud.transformed(&t);
    let mut nm = s.normals.rotated(&t.rotation);
    nm.degenerate = 0;
    let a = cfg.prepare(&s.cloud, &s.normals).unwrap();
    let b = cfg.prepare(&moved, &nm).unwrap();
    let (ea, eb) = (&a.levels[0].edges, &b.levels[0].edges);
    let mut worst = 0.0f64;
    for r in 0..ea.shape()[0] {
        worst = worst.max(max_abs_diff(&ea.row(r)[..4], &eb.row(r)[..4]));
    }
    assert!(worst < 1e-9, "{worst}");
    // the offsets and positional code do rotate
    assert!(max_abs_diff(&ea.row(0)[4..], &eb.row(0)[4..]) > 1e-6);
    let mut tape = Tape::new();
    let pa = positional_encoding(&mut tape, &store, &a.levels[1].center_points()).unwrap();
    let pb = positional_encoding(&mut tape, &store, &b.levels[1].center_points()).unwrap();
    assert!(max_abs_diff(tape.value(pa).data(), tape.value(pb).data()) > 1e-6);
}

#[test]
fn storage_order_does_not_matter() {
    let cfg = tiny();
    let store = cfg.init_params(8).unwrap();
    let s = sample(3);
    let m = s.cloud.len();
    // reverse storage but keep the first point, where sampling starts
    let perm: Vec<usize> = core::iter::once(0).chain((1..m).rev()).collect();
    let cloud = s.cloud.select(&perm).unwrap();
    let normals = s.normals.select(&perm);
    let cfg2 = cfg.clone();
    let a = full_forward(&store, &cfg, &cfg.prepare(&s.cloud, &s.normals).unwrap());
    let b = full_forward(&store, &cfg2, &cfg2.prepare(&cloud, &normals).unwrap());
    let (qa, qb) = (a.rotation.components(), b.rotation.components());
    assert!(max_abs_diff(&qa, &qb) < 1e-12, "{qa:?} {qb:?}");
    assert!((a.translation - b.translation).abs().max() < 1e-12);
    // identical input, bit-identical output
    let c = full_forward(&store, &cfg, &cfg.prepare(&s.cloud, &s.normals).unwrap());
    assert_eq!(a, c);
}

fn grads_by_prefix(cfg: &ModelConfig, seed: u64) -> Vec<(String, bool)> {
    let store = cfg.init_params(seed).unwrap();
    let s = sample(4);
    let prep = cfg.prepare(&s.cloud, &s.normals).unwrap();
    let mut tape = Tape::new();
    let pose = forward(&mut tape, &store, cfg, &prep, Mode::Train, &mut Trace::default()).unwrap();
    let pts = loss_points(&lbracket().vertices, 64);
    let l = pose_loss(&mut tape, &pose, &s.gt, &pts, false).unwrap();
    let g = tape.backward(l).unwrap();
    store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| (n.clone(), g.param(n).is_some_and(|v| v.iter().any(|x| *x != 0.0))))
        .collect()
}

#[test]
fn every_parameter_receives_gradient() {
    for cfg in [tiny(), ModelConfig::default()] {
        for (name, ok) in grads_by_prefix(&cfg, 12) {
            assert!(ok, "no gradient reached {name}");
        }
    }
}

// ---- encoder ----

fn encoder_store(d: usize, cfg: &EncoderConfig, geo: bool, seed: u64) -> ParamStore {
    let mut s = ParamStore::new(seed);
    encoder::init_encoder(&mut s, cfg, d, geo).unwrap();
    s
}

#[test]
fn identical_tokens_attend_uniformly() {
    let cfg = EncoderConfig { layers: 1, heads: 2, k_f: 1, ffn_width: 8 };
    let store = encoder_store(4, &cfg, true, 1);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[&[0.1, 0.2, 0.3, 0.4], &[0.1, 0.2, 0.3, 0.4]]).unwrap());
    let mut trace = Trace::recording_attention();
    multi_head_attention(&mut tape, &store, "encoder.0.attn", x, 2, &mut trace).unwrap();
    let maps = trace.attention.unwrap();
    assert_eq!(maps.len(), 2);
    for m in maps {
        for v in m.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }
}

#[test]
fn zero_queries_average_the_values() {
    let d = 6;
    let cfg = EncoderConfig { layers: 1, heads: 3, k_f: 2, ffn_width: 8 };
    let mut store = encoder_store(d, &cfg, true, 2);
    store.zero_prefix("encoder.0.attn.q");
    for m in ["v", "o"] {
        *store.value_mut(&format!("encoder.0.attn.{m}.w")).unwrap() = Tensor::identity(d);
    }
    let x = random(&[5, d], 3);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = multi_head_attention(&mut tape, &store, "encoder.0.attn", xv, 3, &mut Trace::default()).unwrap();
    let mean: Vec<f64> = (0..d).map(|c| (0..5).map(|r| x.at2(r, c)).sum::<f64>() / 5.0).collect();
    for r in 0..5 {
        assert!(max_abs_diff(tape.value(y).row(r), &mean) < 1e-15);
    }
}

#[test]
fn attention_rejects_bad_head_count() {
    let cfg = EncoderConfig { layers: 1, heads: 4, k_f: 2, ffn_width: 8 };
    let store = encoder_store(6, &cfg, true, 2);
    let mut tape = Tape::new();
    let x = tape.constant(random(&[3, 6], 1));
    assert!(matches!(
        multi_head_attention(&mut tape, &store, "encoder.0.attn", x, 4, &mut Trace::default()),
        Err(crate::error::Error::Config(_))
    ));
    assert!(cfg.validate(6, 3).is_err());
}

#[test]
fn attention_gradcheck() {
    let cfg = EncoderConfig { layers: 1, heads: 2, k_f: 2, ffn_width: 8 };
    let store = encoder_store(4, &cfg, true, 3);
    let x = random(&[5, 4], 4);
    let r = check_inputs(&[x.clone()], 1e-5, |t, v| {
        let y = multi_head_attention(t, &store, "encoder.0.attn", v[0], 2, &mut Trace::default())?;
        probe(t, y)
    })
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
    let names = ["encoder.0.attn.q.w", "encoder.0.attn.k.w", "encoder.0.attn.v.b", "encoder.0.attn.o.w"];
    let r = check_params(&store, Some(&names), 1e-5, 1, |t, s| {
        let xv = t.constant(x.clone());
        let y = multi_head_attention(t, s, "encoder.0.attn", xv, 2, &mut Trace::default())?;
        probe(t, y)
    })
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

/// Direct per-edge evaluation of the geometry-aware module.
fn geo_oracle(store: &ParamStore, prefix: &str, x: &Tensor, nbrs: &IndexMatrix) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let w = store.value(&format!("{prefix}.w")).unwrap();
    let b = store.value(&format!("{prefix}.b")).unwrap().data();
    let mut out = vec![f64::NEG_INFINITY; n * d];
    for i in 0..n {
        for &j in nbrs.row(i) {
            let mut e = x.row(i).to_vec();
            e.extend(x.row(j).iter().zip(x.row(i)).map(|(a, b)| a - b));
            let h = Tensor::matrix(1, 2 * d, e).unwrap().matmul(w).unwrap();
            for c in 0..d {
                let v = (h.data()[c] + b[c]).max(0.0);
                out[i * d + c] = out[i * d + c].max(v);
            }
        }
    }
    out
}

#[test]
fn geometry_module_examples() {
    let d = 4;
    let cfg = EncoderConfig { layers: 1, heads: 2, k_f: 3, ffn_width: 8 };
    let store = encoder_store(d, &cfg, true, 5);
    // identical tokens: identical rows
    let same = Tensor::from_rows(&[&[0.5, -0.1, 0.2, 0.3][..]; 4]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(same);
    let y = geometry_aware_module(&mut tape, &store, "encoder.0.geo", xv, 3).unwrap();
    for r in 1..4 {
        assert_eq!(tape.value(y).row(r), tape.value(y).row(0));
    }
    // k_f = N - 1: dense aggregation over every peer
    let x = random(&[4, d], 6);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = geometry_aware_module(&mut tape, &store, "encoder.0.geo", xv, 3).unwrap();
    let dense = IndexMatrix::new(4, 3, vec![1, 2, 3, 0, 2, 3, 0, 1, 3, 0, 1, 2]).unwrap();
    assert!(max_abs_diff(tape.value(y).data(), &geo_oracle(&store, "encoder.0.geo", &x, &dense)) < 1e-14);
    assert!(geometry_aware_module(&mut tape, &store, "encoder.0.geo", xv, 4).is_err());
}

#[test]
fn feature_neighbors_match_exhaustive_sort() {
    let x = random(&[8, 5], 7);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let nb = feature_neighbors(&tape, xv, 3).unwrap();
    for i in 0..8 {
        let mut all: Vec<(f64, usize)> = (0..8)
            .filter(|&j| j != i)
            .map(|j| (x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), j))
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<usize> = all.iter().take(3).map(|p| p.1).collect();
        assert_eq!(nb.row(i), &want[..]);
    }
}

#[test]
fn geometry_module_gradcheck() {
    let cfg = EncoderConfig { layers: 1, heads: 2, k_f: 3, ffn_width: 8 };
    let store = encoder_store(4, &cfg, true, 8);
    let x = random(&[6, 4], 9);
    let r = check_params(&store, Some(&["encoder.0.geo.w", "encoder.0.geo.b"]), 1e-5, 1, |t, s| {
        let xv = t.constant(x.clone());
        let y = geometry_aware_module(t, s, "encoder.0.geo", xv, 3)?;
        probe(t, y)
    })
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn residual_structure_of_block() {
    let d = 8;
    let cfg = EncoderConfig { layers: 1, heads: 2, k_f: 3, ffn_width: 16 };
    let mut store = encoder_store(d, &cfg, true, 9);
    let x = random(&[5, d], 10);
    store.zero_prefix("encoder.0.reduce");
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = encoder_block(&mut tape, &store, "encoder.0", xv, &cfg, true, &mut Trace::default()).unwrap();
    // expected: x + FFN(LN2(x))
    let g = tape.param(&store, "encoder.0.ln2.g").unwrap();
    let b = tape.param(&store, "encoder.0.ln2.b").unwrap();
    let h = tape.layer_norm(xv, g, b, crate::autodiff::LAYER_NORM_EPS).unwrap();
    let f = crate::autodiff::linear(&mut tape, &store, "encoder.0.ffn.0", h).unwrap();
    let f = tape.relu(f).unwrap();
    let f = crate::autodiff::linear(&mut tape, &store, "encoder.0.ffn.1", f).unwrap();
    let want = tape.add(xv, f).unwrap();
    assert_eq!(tape.value(y), tape.value(want));

    store.zero_prefix("encoder.0.ffn.1");
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = encoder_block(&mut tape, &store, "encoder.0", xv, &cfg, true, &mut Trace::default()).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn encoder_block_gradcheck() {
    let d = 16;
    let cfg = EncoderConfig { layers: 1, heads: 4, k_f: 3, ffn_width: 32 };
    let store = encoder_store(d, &cfg, true, 11);
    let x = random(&[6, d], 12);
    let r = check_params(&store, None, 1e-5, 1, |t, s| {
        let xv = t.constant(x.clone());
        let y = encoder_block(t, s, "encoder.0", xv, &cfg, true, &mut Trace::default())?;
        probe(t, y)
    })
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
    let r = check_inputs(&[x.clone()], 1e-5, |t, v| {
        let y = encoder_block(t, &store, "encoder.0", v[0], &cfg, true, &mut Trace::default())?;
        probe(t, y)
    })
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let d = x.shape()[1];
    Tensor::matrix(perm.len(), d, perm.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap()
}

#[test]
fn encode_is_permutation_equivariant() {
    let d = 16;
    let cfg = EncoderConfig { layers: 2, heads: 4, k_f: 4, ffn_width: 32 };
    let store = encoder_store(d, &cfg, true, 13);
    for seed in 0..5 {
        let x = random(&[10, d], 100 + seed);
        let mut perm: Vec<usize> = (0..10).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut stream_rng(seed, 1));
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = encode(&mut tape, &store, xv, &cfg, true, &mut Trace::default()).unwrap();
            let p = global_pool(&mut tape, y).unwrap();
            (tape.value(y).clone(), tape.value(p).clone())
        };
        let (y, p) = run(&x);
        let (yp, pp) = run(&permute_rows(&x, &perm));
        assert!(max_abs_diff(permute_rows(&y, &perm).data(), yp.data()) < 1e-12);
        assert!(max_abs_diff(p.data(), pp.data()) < 1e-12);
    }
}

#[test]
fn zero_layers_is_identity() {
    let cfg = EncoderConfig { layers: 0, heads: 2, k_f: 1, ffn_width: 8 };
    let store = ParamStore::new(0);
    let x = random(&[4, 4], 1);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = encode(&mut tape, &store, xv, &cfg, true, &mut Trace::default()).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn removing_geometry_branch_changes_output() {
    let d = 8;
    let cfg = EncoderConfig { layers: 1, heads: 2, k_f: 3, ffn_width: 16 };
    let full = encoder_store(d, &cfg, true, 14);
    // ablated store shares every weight; its reduction keeps the attention half
    let mut abl = ParamStore::new(14);
    for (n, p) in full.iter() {
        if !n.contains(".geo.") && !n.starts_with("encoder.0.reduce.w") {
            abl.set_entry(n, p.value.clone(), p.trainable);
        }
    }
    let w = full.value("encoder.0.reduce.w").unwrap();
    abl.set_entry("encoder.0.reduce.w", Tensor::matrix(d, d, w.data()[..d * d].to_vec()).unwrap(), true);
    let x = random(&[6, d], 15);
    let run = |s: &ParamStore, geo: bool| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = encode(&mut tape, s, xv, &cfg, geo, &mut Trace::default()).unwrap();
        tape.value(y).clone()
    };
    assert!(max_abs_diff(run(&full, true).data(), run(&abl, false).data()) > 1e-6);
}

#[test]
fn global_pool_examples() {
    let mut tape = Tape::new();
    let one = tape.constant(Tensor::from_rows(&[&[1.0, -2.0, 3.0]]).unwrap());
    let p = global_pool(&mut tape, one).unwrap();
    assert_eq!(tape.value(p).data(), &[1.0, -2.0, 3.0]);
    let same = tape.constant(Tensor::from_rows(&[&[0.5, 0.25], &[0.5, 0.25], &[0.5, 0.25]]).unwrap());
    let p = global_pool(&mut tape, same).unwrap();
    assert_eq!(tape.value(p).data(), &[0.5, 0.25]);
    let r = check_inputs(&[random(&[5, 3], 16)], 1e-5, |t, v| {
        let p = global_pool(t, v[0])?;
        probe(t, p)
    })
    .unwrap();
    assert!(r.passes(1e-6), "{r:?}");
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = ModelConfig::default();
    let store = cfg.init_params(17).unwrap();
    let s = sample(5);
    let prep = cfg.prepare(&s.cloud, &s.normals).unwrap();
    let mut tape = Tape::new();
    let mut trace = Trace::recording_attention();
    forward(&mut tape, &store, &cfg, &prep, Mode::Eval, &mut trace).unwrap();
    let maps = trace.attention.unwrap();
    assert_eq!(maps.len(), cfg.encoder.layers * cfg.encoder.heads);
    assert!(encoder::attention_rows_sum_error(&maps) < 1e-12);
}

// ---- head and loss ----

fn head_store(d: usize, seed: u64) -> (HeadConfig, ParamStore) {
    let cfg = HeadConfig::default();
    let mut s = ParamStore::new(seed);
    head::init_head(&mut s, &cfg, d).unwrap();
    (cfg, s)
}

#[test]
fn zero_translation_branch_returns_barycenter() {
    let (cfg, mut store) = head_store(8, 1);
    store.zero_prefix("head.t");
    let xbar = Vector3::new(0.1, -0.05, 0.8);
    let mut tape = Tape::new();
    let g = tape.constant(random(&[8], 2));
    let v = head::predict(&mut tape, &store, &cfg, g, &xbar, 10.0).unwrap();
    let p = PoseEstimate::from_vars(&tape, &v).unwrap();
    assert_eq!(p.translation, xbar);
}

#[test]
fn scalar_only_rotation_output_is_identity() {
    let (cfg, mut store) = head_store(8, 2);
    store.zero_prefix("head.r.2.w");
    store.value_mut("head.r.2.b").unwrap().data_mut().copy_from_slice(&[0.0, 0.0, 0.0, 3.0]);
    let mut tape = Tape::new();
    let g = tape.constant(random(&[8], 3));
    let v = head::predict(&mut tape, &store, &cfg, g, &Vector3::zeros(), 10.0).unwrap();
    assert_eq!(tape.value(v.rot), &Tensor::identity(3));
}

#[test]
fn head_gradcheck_through_normalization() {
    let (cfg, store) = head_store(8, 3);
    let g = random(&[8], 4);
    let gt = RigidTransform::from_quat(&normalize_quat([0.2, 0.1, -0.4, 0.8]).unwrap(), Vector3::new(0.0, 0.02, 0.6));
    let pts = loss_points(&lbracket().vertices, 16);
    let xbar = Vector3::new(0.01, 0.0, 0.62);
    let r = check_params(&store, None, 1e-5, 1, |t, s| {
        let gv = t.constant(g.clone());
        let v = head::predict(t, s, &cfg, gv, &xbar, 10.0)?;
        pose_loss(t, &v, &gt, &pts, false)
    })
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

/// Pose variables holding fixed values, for exercising the loss directly.
fn fixed_pose(tape: &mut Tape, q: [f64; 4], t: Vec3) -> PoseVars {
    let raw_q = tape.variable(Tensor::vector(q.to_vec()));
    let qn = tape.normalize(raw_q, 1e-8).unwrap();
    let rot = tape.quat_to_rot(qn).unwrap();
    let delta = tape.variable(Tensor::vector(vec![t.x, t.y, t.z]));
    PoseVars { delta, raw_q, q: qn, rot, t: delta }
}

#[test]
fn loss_examples() {
    let model = lbracket();
    let pts = loss_points(&model.vertices, 64);
    assert_eq!(pts.len(), 64);
    let q = normalize_quat([0.1, 0.7, -0.2, 0.4]).unwrap();
    let t = Vector3::new(0.02, -0.01, 0.7);
    let gt = RigidTransform::from_quat(&q, t);
    for sym in [false, true] {
        let mut tape = Tape::new();
        let p = fixed_pose(&mut tape, q.components(), t);
        let l = pose_loss(&mut tape, &p, &gt, &pts, sym).unwrap();
        assert!(tape.value(l).data()[0] < 1e-15);
    }
    let e = Vector3::new(0.003, -0.004, 0.012);
    let mut tape = Tape::new();
    let p = fixed_pose(&mut tape, q.components(), t + e);
    let l = pose_loss(&mut tape, &p, &gt, &pts, false).unwrap();
    assert!((tape.value(l).data()[0] - e.norm()).abs() < 1e-15);
}

#[test]
fn two_point_symmetric_loss() {
    let pts = vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(-1.0, 0.0, 0.0)];
    let half_turn = UnitQuaternion::from_axis_angle(Vector3::z(), core::f64::consts::PI);
    let gt = RigidTransform::identity();
    let run = |sym: bool| {
        let mut tape = Tape::new();
        let p = fixed_pose(&mut tape, half_turn.components(), Vector3::zeros());
        let l = pose_loss(&mut tape, &p, &gt, &pts, sym).unwrap();
        tape.value(l).data()[0]
    };
    assert!(run(true) < 1e-15);
    assert!((run(false) - 2.0).abs() < 1e-15);
}

#[test]
fn symmetric_loss_bounded_by_plain_loss() {
    let pts = loss_points(&lbracket().vertices, 64);
    let mut rng = stream_rng(21, 0);
    for _ in 0..30 {
        let gt = RigidTransform::from_quat(&random_rotation(&mut rng), Vector3::new(0.0, 0.0, 0.7));
        let q = random_rotation(&mut rng).components();
        let t = Vector3::new(rng.random_range(-0.05..0.05), 0.0, 0.7);
        let run = |sym: bool| {
            let mut tape = Tape::new();
            let p = fixed_pose(&mut tape, q, t);
            let l = pose_loss(&mut tape, &p, &gt, &pts, sym).unwrap();
            tape.value(l).data()[0]
        };
        let (a, s) = (run(false), run(true));
        assert!(s >= 0.0 && s <= a, "{s} > {a}");
    }
}

#[test]
fn negated_quaternion_gives_same_loss() {
    let (cfg, store) = head_store(8, 5);
    let mut neg = store.clone();
    for n in ["head.r.2.w", "head.r.2.b"] {
        neg.value_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = -*v);
    }
    let g = random(&[8], 6);
    let gt = RigidTransform::from_quat(&normalize_quat([0.5, 0.1, -0.4, 0.3]).unwrap(), Vector3::new(0.0, 0.0, 0.6));
    let pts = loss_points(&lbracket().vertices, 64);
    let run = |s: &ParamStore| {
        let mut tape = Tape::new();
        let gv = tape.constant(g.clone());
        let v = head::predict(&mut tape, s, &cfg, gv, &Vector3::new(0.0, 0.0, 0.6), 10.0).unwrap();
        let l = pose_loss(&mut tape, &v, &gt, &pts, false).unwrap();
        (tape.value(v.rot).clone(), tape.value(l).data()[0])
    };
    let (ra, la) = run(&store);
    let (rb, lb) = run(&neg);
    assert_eq!(ra, rb);
    assert!((la - lb).abs() < 1e-12);
}

#[test]
fn translation_equivariance_without_positional_code() {
    let cfg = tiny();
    let mut store = cfg.init_params(19).unwrap();
    store.zero_prefix("pos_enc");
    let s = sample(6);
    let v = Vector3::new(0.12, -0.3, 0.45);
    let a = full_forward(&store, &cfg, &cfg.prepare(&s.cloud, &s.normals).unwrap());
    let b = full_forward(&store, &cfg, &cfg.prepare(&s.cloud.translated(&v), &s.normals).unwrap());
    assert!((b.translation - a.translation - v).abs().max() < 1e-9);
}

#[test]
fn full_network_gradcheck() {
    let mut cfg = tiny();
    cfg.embed.input_points = 64;
    let store = cfg.init_params(23).unwrap();
    let s = sample(7);
    let prep = cfg.prepare(&s.cloud, &s.normals).unwrap();
    assert_eq!(prep.levels.last().unwrap().centers.len(), 8);
    let pts = loss_points(&lbracket().vertices, 32);
    let r = check_params(&store, None, 1e-5, 1, |t, st| {
        let pose = forward(t, st, &cfg, &prep, Mode::Train, &mut Trace::default())?;
        pose_loss(t, &pose, &s.gt, &pts, false)
    })
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn plainconv_variant_runs_and_tracks_statistics() {
    let mut cfg = tiny();
    cfg.gcn_block = BlockKind::Plainconv;
    cfg.geometry_aware = Switch::Off;
    let mut store = cfg.init_params(29).unwrap();
    let s = sample(8);
    let prep = cfg.prepare(&s.cloud, &s.normals).unwrap();
    let mut tape = Tape::new();
    let mut trace = Trace::default();
    forward(&mut tape, &store, &cfg, &prep, Mode::Train, &mut trace).unwrap();
    assert_eq!(trace.batch_stats.len(), 2);
    let before = store.value("embed.b0.bn.mean").unwrap().clone();
    update_running_stats(&mut store, &trace.batch_stats).unwrap();
    let after = store.value("embed.b0.bn.mean").unwrap();
    for ((a, b), m) in after.data().iter().zip(before.data()).zip(&trace.batch_stats[0].1.mean) {
        assert!((a - (0.9 * b + 0.1 * m)).abs() < 1e-15);
    }
    // eval mode is an affine map given the running statistics
    let p = predict(&store, &cfg, &prep).unwrap();
    assert!((p.rotation.norm() - 1.0).abs() < 1e-12);
    let r = check_params(&store, Some(&["embed.b0.conv.w", "embed.b1.bn.gain", "embed.b1.bn.bias"]), 1e-6, 1, |t, st| {
        let pose = forward(t, st, &cfg, &prep, Mode::Train, &mut Trace::default())?;
        pose_loss(t, &pose, &s.gt, &loss_points(&lbracket().vertices, 16), false)
    })
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let mut c = ModelConfig::default();
    c.embed.d_in = 32;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::default();
    c.encoder.k_f = 32;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::default();
    c.embed.k_neighbors = vec![16];
    assert!(c.validate().is_err());
}
