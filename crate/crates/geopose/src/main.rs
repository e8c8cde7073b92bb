use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geopose_core::data::preprocess;
use geopose_core::geometry::{estimate_normals, CameraIntrinsics, Mask, NormalField, PointCloud};
use geopose_core::model::{predict, BlockKind, Switch};
use geopose::config::{ExperimentConfig, Overrides};
use geopose::dataset::{self, Split};
use geopose::experiment::{self, Cell, CONFIG};
use geopose::fsutil::{read_json, write_atomic};
use geopose::{depth, ply, report, Error, Result};
use nalgebra::Vector3;

#[derive(Parser)]
#[command(name = "geopose", version, about = "6D object pose from point clouds")]
struct Cli {
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train on a dataset's train split; writes checkpoint, loss log and val metrics.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint (or the ground truth, with --oracle) on a split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Use ground-truth poses as predictions.
        #[arg(long)]
        oracle: bool,
        /// Network config; defaults to config.json beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: Split,
    },
    /// Predict the pose of one cloud; prints a JSON line with q and t.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// ASCII PLY cloud in camera coordinates (meters).
        #[arg(long, conflicts_with = "depth", required_unless_present = "depth")]
        cloud: Option<PathBuf>,
        /// 16-bit PGM depth image; needs --intrinsics.
        #[arg(long, requires = "intrinsics")]
        depth: Option<PathBuf>,
        /// PGM object mask, nonzero = object; whole image when omitted.
        #[arg(long, requires = "depth")]
        mask: Option<PathBuf>,
        /// JSON {fx, fy, cx, cy, depth_scale}.
        #[arg(long)]
        intrinsics: Option<PathBuf>,
        /// Points kept after backprojection.
        #[arg(long, default_value_t = 1024)]
        max_points: usize,
    },
    /// Train the {gcn, plainconv} x {geometry on, off} grid and write a table.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training seeds shared by every cell.
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Built-in object: Lbracket, eggboxoid or mug-like.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    train_samples: Option<usize>,
    #[arg(long)]
    val_samples: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    cull: Option<f64>,
    #[arg(long)]
    occluder: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// gcn or plainconv.
    #[arg(long, value_parser = parse_block)]
    gcn_block: Option<BlockKind>,
    /// on or off.
    #[arg(long, value_parser = parse_switch)]
    geometry_aware: Option<Switch>,
}

fn parse_block(s: &str) -> std::result::Result<BlockKind, String> {
    match s {
        "gcn" => Ok(BlockKind::Gcn),
        "plainconv" => Ok(BlockKind::Plainconv),
        _ => Err("expected gcn or plainconv".into()),
    }
}

fn parse_switch(s: &str) -> std::result::Result<Switch, String> {
    match s {
        "on" => Ok(Switch::On),
        "off" => Ok(Switch::Off),
        _ => Err("expected on or off".into()),
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let o = Overrides {
            seed: self.seed,
            model: self.model.clone(),
            data_seed: self.data_seed,
            train_samples: self.train_samples,
            val_samples: self.val_samples,
            noise: self.noise,
            cull: self.cull,
            occluder: self.occluder,
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            gcn_block: self.gcn_block,
            geometry_aware: self.geometry_aware,
        };
        ExperimentConfig::resolve(self.config.as_deref(), &o)
    }
}

/// The dataset decides which object is trained on.
fn adopt_dataset_model(cfg: &mut ExperimentConfig, ds: &dataset::Dataset) {
    if cfg.model != ds.model.name {
        log::info!("using dataset object `{}` (config named `{}`)", ds.model.name, cfg.model);
        cfg.model = ds.model.name.clone();
    }
}

fn config_beside(ckpt: &Path, explicit: Option<&Path>) -> Result<ExperimentConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG),
    };
    let cfg = ExperimentConfig::load(&path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { out, cfg } => {
            let cfg = cfg.resolve()?;
            let m = experiment::gen_data(&cfg, &out)?;
            println!("{} samples ({} train, {} val) written to {}", m.samples.len(), m.splits.train[1], m.splits.val[1] - m.splits.val[0], out.display());
        }
        Cmd::Train { data, out, cfg } => {
            let mut cfg = cfg.resolve()?;
            let ds = dataset::load(&data)?;
            adopt_dataset_model(&mut cfg, &ds);
            let o = experiment::run_training(&cfg, &ds)?;
            experiment::write_training(&out, &cfg, &o)?;
            println!(
                "seed {}: train ADD(-S)-0.1d {:.4}, val ADD(-S)-0.1d {:.4}, val ADD-S AUC {:.4}",
                cfg.seed, o.train_report.accuracy_01d, o.val_report.accuracy_01d, o.val_report.adds_auc
            );
        }
        Cmd::Eval { data, out, checkpoint, oracle, config, split } => {
            let ds = dataset::load(&data)?;
            let r = if oracle {
                experiment::run_eval(&ExperimentConfig::default(), None, &ds, split)?
            } else {
                let ckpt = checkpoint.expect("clap enforces --checkpoint without --oracle");
                let cfg = config_beside(&ckpt, config.as_deref())?;
                let store = experiment::load_model(&cfg, &ckpt)?;
                experiment::run_eval(&cfg, Some(&store), &ds, split)?
            };
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            report::write(&out, &r)?;
            println!(
                "{} samples: ADD(-S)-0.1d {:.4}, ADD-0.1d {:.4}, ADD-S-0.1d {:.4}, ADD-S AUC {:.4}",
                r.count, r.accuracy_01d, r.add_01d, r.adds_01d, r.adds_auc
            );
        }
        Cmd::Infer { checkpoint, config, cloud, depth: depth_path, mask, intrinsics, max_points } => {
            let cfg = config_beside(&checkpoint, config.as_deref())?;
            let store = experiment::load_model(&cfg, &checkpoint)?;
            let (pc, normals) = match (cloud, depth_path) {
                (Some(path), _) => {
                    let c = ply::read(&path)?;
                    let pc = PointCloud::new(c.points)?;
                    let normals = match c.normals {
                        Some(n) => NormalField::new(n)?,
                        None => estimate_normals(&pc, cfg.scene.normal_k, &Vector3::zeros())?,
                    };
                    (pc, normals)
                }
                (None, Some(dpath)) => {
                    let kpath = intrinsics.expect("clap enforces --intrinsics with --depth");
                    let k: CameraIntrinsics = read_json(&kpath)?;
                    let d = depth::read_depth(&dpath)?;
                    let m = match mask {
                        Some(p) => depth::read_mask(&p)?,
                        None => Mask::full(d.width, d.height),
                    };
                    preprocess(&d, &m, &k, max_points, cfg.scene.normal_k)?
                }
                (None, None) => unreachable!("clap requires --cloud or --depth"),
            };
            let prep = cfg.network.prepare(&pc, &normals)?;
            let pose = predict(&store, &cfg.network, &prep)?;
            let t = pose.translation;
            let line = serde_json::json!({ "q": pose.rotation.components(), "t": [t.x, t.y, t.z] });
            println!("{line}");
        }
        Cmd::Ablate { data, out, seeds, cfg } => {
            let mut cfg = cfg.resolve()?;
            let ds = dataset::load(&data)?;
            adopt_dataset_model(&mut cfg, &ds);
            let rows = experiment::run_ablation(&cfg, &ds, &Cell::grid(), &seeds, |cell, seed, c, o| {
                let b = if cell.gcn_block == BlockKind::Gcn { "gcn" } else { "plainconv" };
                let g = if cell.geometry_aware.is_on() { "on" } else { "off" };
                experiment::write_training(&out.join(format!("{b}_geo-{g}_seed{seed}")), c, o)
            })?;
            let table = experiment::ablation_csv(&rows);
            write_atomic(&out.join("ablation.csv"), table.as_bytes())?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
