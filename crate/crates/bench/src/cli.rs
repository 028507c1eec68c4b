//! The `mbcf` command line interface.
//!
//! Subcommands: `run` (track one sequence), `bench` (a directory of
//! sequences with an aggregate report), `synth` (materialize a synthetic
//! scenario), and `eval` (metrics from a saved trajectory). Results go to
//! files under `--out`; diagnostics go to stderr. Exit codes: 0 success,
//! 1 input error, 2 internal error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mbcf_core::tracker::{run_sequence, FeatureSource, TrackerConfig};
use mbcf_core::BoundingBox;
use rayon::prelude::*;

use crate::config::{apply_overrides, parse_config_file};
use crate::metrics::{aggregate, curve_csv, otb_metrics, MetricReport};
use crate::sequence::{load_sequence, Sequence};
use crate::synth::{scenario_preset, synth_sequence};
use crate::{BenchError, Result};

#[derive(Parser)]
#[command(name = "mbcf", version, about = "Multi-branch correlation filter tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track a single sequence and write trajectory plus metrics.
    Run(RunArgs),
    /// Evaluate every sequence in a directory and write an aggregate report.
    Bench(BenchArgs),
    /// Generate a synthetic scenario on disk.
    Synth(SynthArgs),
    /// Compute metrics from a saved trajectory and ground truth.
    Eval(EvalArgs),
}

/// Tracker configuration shared by `run` and `bench`. Every config-file key
/// is also a flag of the same name.
#[derive(Args, Default, Clone)]
struct ConfigArgs {
    /// Key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    orientation_bins: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    memory_capacity: Option<String>,
    #[arg(long)]
    update_interval: Option<String>,
    #[arg(long)]
    cg_init_iters: Option<String>,
    #[arg(long)]
    cg_update_iters: Option<String>,
    #[arg(long)]
    cg_formula: Option<String>,
    #[arg(long)]
    search_area_scale: Option<String>,
    #[arg(long)]
    canonical_min: Option<String>,
    #[arg(long)]
    canonical_max: Option<String>,
    #[arg(long)]
    scale_alpha: Option<String>,
    #[arg(long)]
    scale_steps: Option<String>,
    #[arg(long)]
    scale_damping: Option<String>,
    #[arg(long)]
    scale_branch: Option<String>,
    #[arg(long)]
    scale_enabled: Option<String>,
    #[arg(long)]
    kalman_q: Option<String>,
    #[arg(long)]
    kalman_r: Option<String>,
    #[arg(long)]
    fusion_reg: Option<String>,
    #[arg(long)]
    fusion_weight_ema: Option<String>,
    #[arg(long)]
    fusion_energy_from_memory: Option<String>,
    #[arg(long)]
    fusion_energy_every_frame: Option<String>,
    #[arg(long)]
    motion_enabled: Option<String>,
    #[arg(long)]
    motion_map_kind: Option<String>,
    #[arg(long)]
    motion_map_spread_factor: Option<String>,
    #[arg(long)]
    motion_map_layers: Option<String>,
    #[arg(long)]
    confidence_threshold: Option<String>,
    #[arg(long)]
    confidence_smoothing: Option<String>,
    #[arg(long)]
    confidence_warmup: Option<String>,
    /// Ablation shortcut: disable the motion module entirely.
    #[arg(long, default_value_t = false)]
    no_motion: bool,
    /// Feature source, e.g. `external:<dir>` for precomputed feature files.
    #[arg(long)]
    features: Option<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<TrackerConfig> {
        let mut config = TrackerConfig::default();
        if let Some(path) = &self.config {
            let pairs = parse_config_file(path)?;
            apply_overrides(&mut config, &pairs)?;
        }
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut push = |key: &str, value: &Option<String>| {
            if let Some(v) = value {
                pairs.push((key.to_string(), v.clone()));
            }
        };
        push("layers", &self.layers);
        push("lambda", &self.lambda);
        push("orientation_bins", &self.orientation_bins);
        push("learning_rate", &self.learning_rate);
        push("memory_capacity", &self.memory_capacity);
        push("update_interval", &self.update_interval);
        push("cg_init_iters", &self.cg_init_iters);
        push("cg_update_iters", &self.cg_update_iters);
        push("cg_formula", &self.cg_formula);
        push("search_area_scale", &self.search_area_scale);
        push("canonical_min", &self.canonical_min);
        push("canonical_max", &self.canonical_max);
        push("scale_alpha", &self.scale_alpha);
        push("scale_steps", &self.scale_steps);
        push("scale_damping", &self.scale_damping);
        push("scale_branch", &self.scale_branch);
        push("scale_enabled", &self.scale_enabled);
        push("kalman_q", &self.kalman_q);
        push("kalman_r", &self.kalman_r);
        push("fusion_reg", &self.fusion_reg);
        push("fusion_weight_ema", &self.fusion_weight_ema);
        push("fusion_energy_from_memory", &self.fusion_energy_from_memory);
        push("fusion_energy_every_frame", &self.fusion_energy_every_frame);
        push("motion_enabled", &self.motion_enabled);
        push("motion_map_kind", &self.motion_map_kind);
        push("motion_map_spread_factor", &self.motion_map_spread_factor);
        push("motion_map_layers", &self.motion_map_layers);
        push("confidence_threshold", &self.confidence_threshold);
        push("confidence_smoothing", &self.confidence_smoothing);
        push("confidence_warmup", &self.confidence_warmup);
        apply_overrides(&mut config, &pairs)?;
        if self.no_motion {
            config.motion_enabled = false;
        }
        if let Some(features) = &self.features {
            config.feature_source = match features.split_once(':') {
                Some(("external", path)) if !path.is_empty() => {
                    FeatureSource::External(PathBuf::from(path))
                }
                _ => {
                    return Err(BenchError::Input(format!(
                        "--features expects external:<dir>, got {features:?}"
                    )))
                }
            };
        }
        Ok(config)
    }
}

#[derive(Args)]
struct RunArgs {
    /// Sequence directory (img/ plus groundtruth_rect.txt).
    #[arg(long)]
    seq: PathBuf,
    /// Output directory for trajectory and metrics.
    #[arg(long)]
    out: PathBuf,
    /// Rayon worker threads (default: rayon's choice).
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Directory containing one subdirectory per sequence.
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SynthArgs {
    /// Scenario preset: static, constant-velocity, scale-drift, occlusion.
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Trajectory file written by `run`.
    #[arg(long)]
    traj: PathBuf,
    /// Sequence directory providing ground truth.
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Entry point used by `main`; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            // Usage and parse failures are input errors.
            let is_help = matches!(
                err.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            eprint!("{err}");
            return if is_help { 0 } else { 1 };
        }
    };
    let result = match cli.command {
        Command::Run(args) => run_command(args),
        Command::Bench(args) => bench_command(args),
        Command::Synth(args) => synth_command(args),
        Command::Eval(args) => eval_command(args),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn in_worker_pool<R: Send>(workers: Option<usize>, job: impl FnOnce() -> R + Send) -> R {
    match workers {
        Some(n) if n > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("worker pool")
            .install(job),
        _ => job(),
    }
}

fn format_trajectory(trajectory: &[BoundingBox]) -> String {
    let mut out = String::new();
    for b in trajectory {
        out.push_str(&format!("{:.4},{:.4},{:.4},{:.4}\n", b.x, b.y, b.w, b.h));
    }
    out
}

fn write_metric_files(dir: &Path, report: &MetricReport) -> Result<()> {
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(report)?)?;
    fs::write(
        dir.join("precision_curve.csv"),
        curve_csv(("threshold_px", "precision"), (0..).map(|i| i as f64), &report.precision),
    )?;
    fs::write(
        dir.join("success_curve.csv"),
        curve_csv(("iou_threshold", "success"), (0..).map(|i| i as f64 / 20.0), &report.success),
    )?;
    Ok(())
}

fn track_sequence(sequence: &Sequence, config: &TrackerConfig) -> Result<Vec<BoundingBox>> {
    if sequence.is_empty() {
        return Err(BenchError::Input("sequence has no frames".into()));
    }
    let frames = sequence.all_frames()?;
    run_sequence(frames, sequence.truth[0], config).map_err(BenchError::from)
}

fn run_command(args: RunArgs) -> Result<()> {
    let config = args.config.build()?;
    let sequence = load_sequence(&args.seq)?;
    fs::create_dir_all(&args.out)?;
    let trajectory = in_worker_pool(args.workers, || track_sequence(&sequence, &config))?;
    fs::write(args.out.join("trajectory.txt"), format_trajectory(&trajectory))?;
    let report = otb_metrics(&trajectory, &sequence.truth)?;
    write_metric_files(&args.out, &report)?;
    eprintln!(
        "{}: {} frames, precision@20 {:.3}, AUC {:.3}",
        sequence.name,
        trajectory.len(),
        report.precision[20],
        report.auc
    );
    Ok(())
}

fn bench_command(args: BenchArgs) -> Result<()> {
    let config = args.config.build()?;
    let mut dirs: Vec<PathBuf> = fs::read_dir(&args.seq)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("groundtruth_rect.txt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(BenchError::Input(format!(
            "{} contains no sequence directories",
            args.seq.display()
        )));
    }
    fs::create_dir_all(&args.out)?;

    let results: Vec<(String, Vec<String>, MetricReport)> = in_worker_pool(args.workers, || {
        dirs.par_iter()
            .map(|dir| {
                let sequence = load_sequence(dir)?;
                let trajectory = track_sequence(&sequence, &config)?;
                let report = otb_metrics(&trajectory, &sequence.truth)?;
                let traj_dir = args.out.join(&sequence.name);
                fs::create_dir_all(&traj_dir)?;
                fs::write(traj_dir.join("trajectory.txt"), format_trajectory(&trajectory))?;
                Ok((sequence.name.clone(), sequence.attributes.clone(), report))
            })
            .collect::<Result<_>>()
    })?;

    let mut reports = BTreeMap::new();
    let mut attributes = BTreeMap::new();
    for (name, attrs, report) in results {
        eprintln!("{name}: AUC {:.3}, precision@20 {:.3}", report.auc, report.precision[20]);
        attributes.insert(name.clone(), attrs);
        reports.insert(name, report);
    }
    let agg = aggregate(reports, &attributes)?;
    fs::write(args.out.join("report.json"), serde_json::to_string_pretty(&agg)?)?;
    fs::write(
        args.out.join("mean_precision_curve.csv"),
        curve_csv(("threshold_px", "precision"), (0..).map(|i| i as f64), &agg.mean_precision),
    )?;
    fs::write(
        args.out.join("mean_success_curve.csv"),
        curve_csv(("iou_threshold", "success"), (0..).map(|i| i as f64 / 20.0), &agg.mean_success),
    )?;
    eprintln!("mean AUC {:.3}, mean precision@20 {:.3}", agg.mean_auc, agg.precision_at_20);
    Ok(())
}

fn synth_command(args: SynthArgs) -> Result<()> {
    let spec = scenario_preset(&args.scenario, args.seed)?;
    let sequence = synth_sequence(&spec)?;
    fs::create_dir_all(&args.out)?;
    sequence.save(&args.out)?;
    fs::write(args.out.join("scenario.json"), serde_json::to_string_pretty(&spec)?)?;
    eprintln!("wrote {} frames to {}", sequence.len(), args.out.display());
    Ok(())
}

fn parse_trajectory(path: &Path) -> Result<Vec<BoundingBox>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| BenchError::Input(format!("cannot read trajectory {}: {e}", path.display())))?;
    let mut boxes = Vec::new();
    for (number, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(BenchError::Input(format!(
                "trajectory line {}: expected 4 fields",
                number + 1
            )));
        }
        let mut values = [0.0; 4];
        for (slot, field) in values.iter_mut().zip(&fields) {
            *slot = field.parse().map_err(|_| {
                BenchError::Input(format!("trajectory line {}: bad number {field:?}", number + 1))
            })?;
        }
        boxes.push(BoundingBox::new(values[0], values[1], values[2], values[3]));
    }
    Ok(boxes)
}

fn eval_command(args: EvalArgs) -> Result<()> {
    let trajectory = parse_trajectory(&args.traj)?;
    let sequence = load_sequence(&args.seq)?;
    let report = otb_metrics(&trajectory, &sequence.truth)?;
    fs::create_dir_all(&args.out)?;
    write_metric_files(&args.out, &report)?;
    eprintln!(
        "{}: precision@20 {:.3}, OP {:.3}, AUC {:.3}",
        sequence.name, report.precision[20], report.op, report.auc
    );
    Ok(())
}
