//! Training runs, evaluation and the ablation grid, with their artifacts.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use geopose_core::autodiff::{checkpoint, ParamStore};
use geopose_core::data::{gen_samples, builtin_model};
use geopose_core::metrics::MetricReport;
use geopose_core::model::{BlockKind, Switch};
use geopose_core::train::{evaluate, evaluate_oracle, train};

use crate::config::ExperimentConfig;
use crate::dataset::{self, Dataset, Manifest, Split};
use crate::error::{Error, Result};
use crate::fsutil::{read_bytes, write_atomic, write_json};
use crate::report;

pub const CHECKPOINT: &str = "checkpoint.gpck";
pub const CONFIG: &str = "config.json";
pub const LOSS_LOG: &str = "loss.csv";

/// Generates the configured scene and writes it to `out`.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    let model = builtin_model(&cfg.model)?;
    let samples = gen_samples(&model, &cfg.scene)?;
    log::info!("generated {} samples of `{}` (data seed {})", samples.len(), model.name, cfg.scene.seed);
    dataset::save(out, &model, &samples, cfg.scene.train_samples)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: u128,
}

pub struct TrainOutcome {
    pub store: ParamStore,
    pub losses: Vec<LossRow>,
    pub train_report: MetricReport,
    pub val_report: MetricReport,
}

/// Trains on the dataset's train split from a fresh initialization and
/// evaluates both splits.
pub fn run_training(cfg: &ExperimentConfig, ds: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut store = cfg.network.init_params(cfg.seed)?;
    let (train_set, train_ids) = ds.split(Split::Train);
    let start = Instant::now();
    let mut losses = Vec::with_capacity(cfg.train.steps);
    let every = (cfg.train.steps / 20).max(1);
    log::info!(
        "training seed {} on {} `{}` samples: {} steps, batch {}, lr {}",
        cfg.seed,
        train_set.len(),
        ds.model.name,
        cfg.train.steps,
        cfg.train.batch,
        cfg.train.lr
    );
    train(&mut store, &cfg.network, &cfg.train, train_set, &ds.model, cfg.seed, |s| {
        losses.push(LossRow { step: s.step, loss: s.loss, wall_ms: start.elapsed().as_millis() });
        if (s.step + 1) % every == 0 {
            log::info!("step {:>5} loss {:.5} lr {:.2e}", s.step + 1, s.loss, s.lr);
        }
    })?;
    let train_report = evaluate(&store, &cfg.network, train_set, &train_ids, &ds.model)?;
    let (val_set, val_ids) = ds.split(Split::Val);
    let val_report = evaluate(&store, &cfg.network, val_set, &val_ids, &ds.model)?;
    log::info!(
        "seed {}: train ADD(-S)-0.1d {:.3}, val {:.3} ({:.1} s)",
        cfg.seed,
        train_report.accuracy_01d,
        val_report.accuracy_01d,
        start.elapsed().as_secs_f64()
    );
    Ok(TrainOutcome { store, losses, train_report, val_report })
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("step,loss,wall_ms\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.step, r.loss, r.wall_ms);
    }
    s
}

/// Checkpoint, effective config, loss log, and the val report files; the
/// train-split report goes to `train_metrics.json`.
pub fn write_training(out: &Path, cfg: &ExperimentConfig, o: &TrainOutcome) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join(CHECKPOINT), &checkpoint::encode(&o.store))?;
    write_json(&out.join(CONFIG), cfg)?;
    write_atomic(&out.join(LOSS_LOG), loss_csv(&o.losses).as_bytes())?;
    write_json(&out.join("train_metrics.json"), &o.train_report)?;
    report::write(out, &o.val_report)
}

/// Rebuilds the network described by `cfg` and loads the checkpoint into
/// it; names and shapes must match exactly.
pub fn load_model(cfg: &ExperimentConfig, ckpt: &Path) -> Result<ParamStore> {
    let bytes = read_bytes(ckpt)?;
    let mut store = cfg.network.init_params(cfg.seed)?;
    checkpoint::load_into(&mut store, &bytes)?;
    Ok(store)
}

/// Evaluates a split; with `oracle` the ground truth stands in for the
/// network, which checks the scoring path end to end.
pub fn run_eval(cfg: &ExperimentConfig, store: Option<&ParamStore>, ds: &Dataset, split: Split) -> Result<MetricReport> {
    let (samples, ids) = ds.split(split);
    match store {
        Some(s) => Ok(evaluate(s, &cfg.network, samples, &ids, &ds.model)?),
        None => Ok(evaluate_oracle(samples, &ids, &ds.model)),
    }
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub gcn_block: BlockKind,
    pub geometry_aware: Switch,
}

impl Cell {
    pub const FULL: Cell = Cell { gcn_block: BlockKind::Gcn, geometry_aware: Switch::On };
    pub const BASELINE: Cell = Cell { gcn_block: BlockKind::Plainconv, geometry_aware: Switch::Off };

    /// Full model first, baseline last.
    pub fn grid() -> [Cell; 4] {
        [
            Cell::FULL,
            Cell { gcn_block: BlockKind::Gcn, geometry_aware: Switch::Off },
            Cell { gcn_block: BlockKind::Plainconv, geometry_aware: Switch::On },
            Cell::BASELINE,
        ]
    }

    fn labels(self) -> (&'static str, &'static str) {
        let b = match self.gcn_block {
            BlockKind::Gcn => "gcn",
            BlockKind::Plainconv => "plainconv",
        };
        let g = if self.geometry_aware.is_on() { "on" } else { "off" };
        (b, g)
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub cell: Cell,
    /// `(seed, val accuracy)` per seed.
    pub val: Vec<(u64, f64)>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.val.iter().map(|v| v.1).sum::<f64>() / self.val.len().max(1) as f64
    }
}

/// Trains every cell under every seed with otherwise identical settings.
/// `on_run` sees each finished run (e.g. to save artifacts).
pub fn run_ablation(
    base: &ExperimentConfig,
    ds: &Dataset,
    cells: &[Cell],
    seeds: &[u64],
    mut on_run: impl FnMut(Cell, u64, &ExperimentConfig, &TrainOutcome) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    let mut rows: Vec<AblationRow> = cells.iter().map(|&cell| AblationRow { cell, val: Vec::new() }).collect();
    for &seed in seeds {
        for row in rows.iter_mut() {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.network.gcn_block = row.cell.gcn_block;
            cfg.network.geometry_aware = row.cell.geometry_aware;
            let o = run_training(&cfg, ds)?;
            row.val.push((seed, o.val_report.accuracy_01d));
            on_run(row.cell, seed, &cfg, &o)?;
        }
    }
    Ok(rows)
}

/// One row per cell: the two switches, the val ADD(-S)-0.1d of each seed,
/// and their mean.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("gcn_block,geometry_aware");
    if let Some(first) = rows.first() {
        for (seed, _) in &first.val {
            let _ = write!(s, ",seed_{seed}");
        }
    }
    s.push_str(",mean\n");
    for r in rows {
        let (b, g) = r.cell.labels();
        let _ = write!(s, "{b},{g}");
        for (_, v) in &r.val {
            let _ = write!(s, ",{v:.4}");
        }
        let _ = writeln!(s, ",{:.4}", r.mean());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_table_layout() {
        let rows: Vec<AblationRow> = Cell::grid()
            .into_iter()
            .enumerate()
            .map(|(i, cell)| AblationRow { cell, val: vec![(1, 0.5 + 0.1 * i as f64), (2, 0.25)] })
            .collect();
        let csv = ablation_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "gcn_block,geometry_aware,seed_1,seed_2,mean");
        assert_eq!(lines[1], "gcn,on,0.5000,0.2500,0.3750");
        assert_eq!(lines[4], "plainconv,off,0.8000,0.2500,0.5250");
    }

    #[test]
    fn loss_log_columns() {
        let s = loss_csv(&[LossRow { step: 0, loss: 0.5, wall_ms: 12 }]);
        assert_eq!(s, "step,loss,wall_ms\n0,0.5,12\n");
    }
}
