//! `ssc`: train, evaluate, infer, benchmark, synthesize and export.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ssc_core::bench::run_bench;
use ssc_core::checkpoint::{load_checkpoint, CheckpointError};
use ssc_core::config::{Ablation, ConfigError, RunConfig};
use ssc_core::export::{export_points, Palette};
use ssc_core::kitti::{
    generate_synthetic_scene, read_invalid_mask, read_scan, read_voxel_labels, write_invalid_mask, write_point_labels,
    write_scan, write_voxel_labels, IoError, LabelMap, PointCloud,
};
use ssc_core::metrics::{ConfusionMatrix, MetricError, Metrics};
use ssc_core::train::{load_kitti_dir, synthetic_samples, Sample, TrainError, Trainer};
use ssc_core::Model;

#[derive(Parser, Debug)]
#[command(name = "ssc", version, about = "LiDAR semantic scene completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for the model, training and synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Named ablation preset: 2d-ce, 2d-ce-lvz, full-seg-lvz, enc-only-ce, enc-only-ce-lvz, full.
    #[arg(long, global = true)]
    ablation: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and write log.jsonl, final.ckpt and best.ckpt to --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score prediction label files against ground truth by stem.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Also write per-scene and aggregate records as JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict one scan (or the synthetic scene for --seed) and time it.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scan: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Timed forward passes after 3 warm-up runs.
        #[arg(long, default_value_t = 10)]
        runs: usize,
    },
    /// Operator microbenchmarks as JSON.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write synthetic scenes in the dataset directory layout.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Convert a label grid to an `x y z r g b label` point list.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML palette: `[colors]` table of class id to `[r, g, b]`.
        #[arg(long)]
        palette: Option<PathBuf>,
    },
}

#[derive(Debug)]
struct CliError {
    class: &'static str,
    message: String,
}

impl CliError {
    fn new(class: &'static str, message: impl Into<String>) -> Self {
        Self {
            class,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::new("config", e.to_string())
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        Self::new("io", e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::new("checkpoint", e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let class = match e {
            TrainError::Diverged { .. } => "diverged",
            TrainError::Io { .. } => "io",
            TrainError::Checkpoint(_) => "checkpoint",
            _ => "train",
        };
        Self::new(class, e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        Self::new("eval", e.to_string())
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::new("io", format!("{}: {e}", path.display()))
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {}", single_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class, single_line(&e.message));
            ExitCode::FAILURE
        }
    }
}

/// Config file, then preset, then overrides, then the seed flag.
fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(name) = &common.ablation {
        Ablation::parse(name)?.apply(&mut config);
    }
    let mut config = config.with_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        config.model.seed = seed;
        config.train.seed = seed;
        config.bench.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn print_config(config: &RunConfig) {
    eprintln!("# resolved config");
    for line in config.to_toml().lines() {
        eprintln!("# {line}");
    }
}

fn label_map(config: &RunConfig) -> LabelMap {
    config
        .data
        .learning_map
        .clone()
        .unwrap_or_else(|| LabelMap::identity(config.model.class_count))
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { common, out } => cmd_train(&common, &out),
        Command::Eval { common, pred, truth, out } => cmd_eval(&common, &pred, &truth, out.as_deref()),
        Command::Infer {
            common,
            checkpoint,
            scan,
            out,
            runs,
        } => cmd_infer(&common, &checkpoint, scan.as_deref(), &out, runs),
        Command::Bench { common, out } => cmd_bench(&common, out.as_deref()),
        Command::Synth { common, out, count } => cmd_synth(&common, &out, count),
        Command::Export {
            common,
            grid,
            out,
            palette,
        } => cmd_export(&common, &grid, &out, palette.as_deref()),
    }
}

fn datasets(config: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>), CliError> {
    let extents = config.model.grid.extents();
    let map = label_map(config);
    let synth = config.synth();
    let train = match &config.data.kitti_train {
        Some(dir) => load_kitti_dir(dir, extents, &map)?,
        None => synthetic_samples(&synth, config.data.train_seed, config.data.train_scenes)
            .map_err(|e| CliError::new("config", e.to_string()))?,
    };
    let val = match &config.data.kitti_val {
        Some(dir) => load_kitti_dir(dir, extents, &map)?,
        None => synthetic_samples(&synth, config.data.val_seed, config.data.val_scenes)
            .map_err(|e| CliError::new("config", e.to_string()))?,
    };
    Ok((train, val))
}

fn metric_table(m: &Metrics) -> String {
    let mut s = format!(
        "IoU {:.4}  Precision {:.4}  Recall {:.4}  mIoU {:.4}\nper-class IoU:",
        m.iou, m.precision, m.recall, m.miou
    );
    for (i, v) in m.per_class_iou.iter().enumerate() {
        s.push_str(&format!(" {}={:.4}", i + 1, v));
    }
    s
}

fn cmd_train(common: &Common, out: &Path) -> Result<(), CliError> {
    let config = resolve(common)?;
    print_config(&config);
    let (train, val) = datasets(&config)?;
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, config.to_toml()).map_err(|e| io_error(&cfg_path, e))?;
    let model = Model::new(config.model.clone()).map_err(|e| CliError::new("config", e.to_string()))?;
    let mut trainer = Trainer::new(model, config.train.clone());
    let summary = trainer.fit(&train, &val, Some(out), |r| {
        let val = r
            .val
            .as_ref()
            .map(|m| format!(" val_iou {:.4} val_miou {:.4}", m.iou, m.miou))
            .unwrap_or_default();
        println!(
            "epoch {:>4} lr {:.6} loss {:.5} com {:.5} seg {:.5}{val} ({:.1}s)",
            r.epoch, r.lr, r.loss.total, r.loss.loss_com, r.loss.loss_seg, r.seconds
        );
    })?;
    if let Some(m) = summary.history.last().and_then(|r| r.val.as_ref().or(r.train.as_ref())) {
        println!("{}", metric_table(m));
    }
    println!("checkpoint {} sha256 {}", out.join("final.ckpt").display(), summary.final_digest);
    Ok(())
}

fn stems(dir: &Path) -> Result<BTreeSet<String>, CliError> {
    let mut out = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(|e| io_error(dir, e))? {
        let path = entry.map_err(|e| io_error(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "label") {
            if let Some(s) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(s.to_string());
            }
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct SceneRecord<'a> {
    scene: &'a str,
    #[serde(flatten)]
    metrics: &'a Metrics,
}

fn cmd_eval(common: &Common, pred: &Path, truth: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let config = resolve(common)?;
    print_config(&config);
    let extents = config.model.grid.extents();
    let map = label_map(&config);
    let (ps, ts) = (stems(pred)?, stems(truth)?);
    let common_stems: Vec<&String> = ps.intersection(&ts).collect();
    if common_stems.is_empty() {
        return Err(CliError::new("eval", "no prediction/truth stems in common"));
    }
    let unpaired: Vec<&String> = ps.symmetric_difference(&ts).collect();
    if !unpaired.is_empty() {
        let list: Vec<&str> = unpaired.iter().map(|s| s.as_str()).collect();
        return Err(CliError::new("eval", format!("unpaired stems: {}", list.join(", "))));
    }
    let mut total = ConfusionMatrix::new(config.model.class_count);
    let mut lines = Vec::new();
    for stem in common_stems {
        let p = read_voxel_labels(pred.join(format!("{stem}.label")), extents, &map)?;
        let t = read_voxel_labels(truth.join(format!("{stem}.label")), extents, &map)?;
        let mask_path = truth.join(format!("{stem}.invalid"));
        let mask = if mask_path.exists() {
            Some(read_invalid_mask(&mask_path, extents)?)
        } else {
            None
        };
        let mut cm = ConfusionMatrix::new(config.model.class_count);
        cm.accumulate(&p, &t, mask.as_deref())?;
        total.merge(&cm)?;
        let m = cm.metrics();
        let line = serde_json::to_string(&SceneRecord { scene: stem, metrics: &m }).expect("record serializes");
        println!("{line}");
        lines.push(line);
    }
    let agg = total.metrics();
    let line = serde_json::to_string(&SceneRecord {
        scene: "aggregate",
        metrics: &agg,
    })
    .expect("record serializes");
    lines.push(line);
    println!("{agg}");
    if let Some(path) = out {
        fs::write(path, lines.join("\n") + "\n").map_err(|e| io_error(path, e))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct InferTiming {
    runs: usize,
    warmup: usize,
    median_seconds: f64,
    min_seconds: f64,
    peak_rss_kib: Option<u64>,
    occupied: usize,
}

/// `VmHWM` from `/proc/self/status`, where available.
fn peak_rss_kib() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn cmd_infer(common: &Common, checkpoint: &Path, scan: Option<&Path>, out: &Path, runs: usize) -> Result<(), CliError> {
    let model: Model = load_checkpoint(checkpoint)?;
    let mut config = resolve(common)?;
    if common.config.is_some()
        && (config.model.grid != model.config().grid || config.model.class_count != model.config().class_count)
    {
        return Err(CliError::new(
            "config",
            format!(
                "checkpoint grid {:?} with {} classes does not match config grid {:?} with {} classes",
                model.config().grid.extents(),
                model.config().class_count,
                config.model.grid.extents(),
                config.model.class_count
            ),
        ));
    }
    let seed = common.seed.unwrap_or(config.data.val_seed);
    config.model = model.config().clone();
    print_config(&config);
    let cloud: PointCloud = match scan {
        Some(path) => read_scan(path)?,
        None => {
            generate_synthetic_scene(seed, &config.synth())
                .map_err(|e| CliError::new("config", e.to_string()))?
                .cloud
        }
    };
    let infer = || model.forward_infer(&cloud).map_err(|e| CliError::new("model", e.to_string()));
    let warmup = 3;
    for _ in 0..warmup {
        infer()?;
    }
    let mut times = Vec::new();
    let mut pred = None;
    for _ in 0..runs.max(1) {
        let t = Instant::now();
        let p = infer()?;
        times.push(t.elapsed().as_secs_f64());
        pred = Some(p);
    }
    let pred = pred.expect("at least one run");
    write_voxel_labels(out, &pred, &label_map(&config))?;
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median = if n % 2 == 1 { times[n / 2] } else { (times[n / 2 - 1] + times[n / 2]) / 2.0 };
    let timing = InferTiming {
        runs: n,
        warmup,
        median_seconds: median,
        min_seconds: times[0],
        peak_rss_kib: peak_rss_kib(),
        occupied: pred.occupied(),
    };
    println!("{}", serde_json::to_string(&timing).expect("timing serializes"));
    Ok(())
}

fn cmd_bench(common: &Common, out: Option<&Path>) -> Result<(), CliError> {
    let config = resolve(common)?;
    print_config(&config);
    let report = run_bench(&config.bench).map_err(|e| CliError::new("bench", e.to_string()))?;
    let json = report.to_json();
    println!("{json}");
    if let Some(path) = out {
        fs::write(path, json + "\n").map_err(|e| io_error(path, e))?;
    }
    Ok(())
}

fn cmd_synth(common: &Common, out: &Path, count: usize) -> Result<(), CliError> {
    let config = resolve(common)?;
    print_config(&config);
    let map = label_map(&config);
    let first = common.seed.unwrap_or(config.data.train_seed);
    for dir in ["velodyne", "voxels", "labels"] {
        let d = out.join(dir);
        fs::create_dir_all(&d).map_err(|e| io_error(&d, e))?;
    }
    for seed in first..first + count as u64 {
        let scene = generate_synthetic_scene(seed, &config.synth()).map_err(|e| CliError::new("config", e.to_string()))?;
        let stem = format!("{seed:06}");
        write_scan(out.join("velodyne").join(format!("{stem}.bin")), &scene.cloud)?;
        write_voxel_labels(out.join("voxels").join(format!("{stem}.label")), &scene.grid, &map)?;
        write_invalid_mask(out.join("voxels").join(format!("{stem}.invalid")), &scene.invalid)?;
        write_point_labels(out.join("labels").join(format!("{stem}.label")), &scene.point_labels, &map)?;
        println!("{stem} points {} occupied {}", scene.cloud.len(), scene.grid.occupied());
    }
    Ok(())
}

fn cmd_export(common: &Common, grid: &Path, out: &Path, palette: Option<&Path>) -> Result<(), CliError> {
    let config = resolve(common)?;
    print_config(&config);
    let palette = match palette {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            Palette::from_toml(&text).map_err(|e| CliError::new("config", format!("{}: {e}", path.display())))?
        }
        None => Palette::default(),
    };
    let g = read_voxel_labels(grid, config.model.grid.extents(), &label_map(&config))?;
    let text = export_points(&g, &palette);
    fs::write(out, &text).map_err(|e| io_error(out, e))?;
    println!("{} points", text.lines().count());
    Ok(())
}
