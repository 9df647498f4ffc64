//! `windvr` command-line surface.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::apt::{train_apt, TrainConfig};
use crate::data::{held_out_set, Clip, DegradationParams, Pair};
use crate::distill::{run_progressive, DistillConfig, DistillSchedule};
use crate::error::{invalid, Error, Result};
use crate::flow::SamplerConfig;
use crate::metrics::{clip_metrics, ssim, MetricReport, PSNR_CAP};
use crate::model::{load_backbone, save_backbone, Backbone, BackboneConfig, CheckpointKind, Manifest};
use crate::restore::{restore_clip, restore_set};
use crate::teacher::{pretrain, PretrainConfig};
use crate::train::MetricsLog;
use crate::window::{GridShape, WindowCounts, WindowLayout, WindowPolicy, WindowSize, DEFAULT_TRAIN_HW};

#[derive(Debug, Parser)]
#[command(name = "windvr", version, about = "One-step video restoration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write procedural HQ clips and their degraded LQ counterparts.
    GenData(GenData),
    /// Train a multi-step teacher with flow matching.
    Pretrain(PretrainArgs),
    /// Progressively distill a teacher down to one sampling step.
    Distill(DistillArgs),
    /// Adversarial post-training of a one-step generator.
    TrainApt(TrainAptArgs),
    /// Restore an LQ clip with a checkpoint.
    Restore(RestoreArgs),
    /// Compare a prediction with a reference clip.
    Eval(EvalArgs),
    /// Print the attention window layout of a grid as JSON.
    Windows(WindowsArgs),
    /// Emit step-count vs PSNR/SSIM as CSV.
    PlotData(PlotDataArgs),
}

/// Comma-separated list of integers, e.g. `1,45,80`.
#[derive(Clone, Debug, PartialEq)]
struct UsizeList(Vec<usize>);

impl FromStr for UsizeList {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad integer {p:?}: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(UsizeList)
    }
}

impl UsizeList {
    fn exact<const N: usize>(&self, what: &str) -> Result<[usize; N]> {
        self.0
            .as_slice()
            .try_into()
            .map_err(|_| invalid(format!("{what} needs {N} comma-separated integers, got {:?}", self.0)))
    }
}

#[derive(Debug, Args)]
struct GenData {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    frames: usize,
    /// HQ height,width (each divisible by 4).
    #[arg(long)]
    hw: UsizeList,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    /// TOML or JSON file with optional `model` and `pretrain` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DistillArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long, default_value = "64,32,16,8,4,2,1")]
    schedule: UsizeList,
    /// Iterations per stage.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// TOML or JSON distillation config (stream, optimizer, probe size).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainAptArgs {
    /// One-step student checkpoint.
    #[arg(long)]
    gen: PathBuf,
    /// Pre-distillation checkpoint (or a discriminator checkpoint).
    #[arg(long)]
    disc: PathBuf,
    /// TOML or JSON training config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RestoreArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    cfg: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output height,width; defaults to 4x the input.
    #[arg(long)]
    hw: Option<UsizeList>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Window counts t,h,w for an adaptive layout used by the boundary score.
    #[arg(long)]
    counts: Option<UsizeList>,
    #[arg(long)]
    train_hw: Option<UsizeList>,
    /// Fixed window size t,h,w for the boundary score (instead of adaptive).
    #[arg(long)]
    fixed: Option<UsizeList>,
}

#[derive(Debug, Args)]
struct WindowsArgs {
    #[arg(long)]
    grid: UsizeList,
    #[arg(long, default_value = "1,3,3")]
    counts: UsizeList,
    #[arg(long)]
    train_hw: Option<UsizeList>,
    /// Use a fixed window size t,h,w instead of the adaptive rule.
    #[arg(long)]
    fixed: Option<UsizeList>,
}

#[derive(Debug, Args)]
struct PlotDataArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "1,2,4,8,16,32,64")]
    steps: UsizeList,
    #[arg(long, default_value_t = 1.0)]
    cfg: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of procedural held-out clips.
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value = "16,16")]
    hw: UsizeList,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct PretrainJob {
    model: BackboneConfig,
    pretrain: PretrainConfig,
}

/// Reads a TOML (`.toml`) or JSON file into `T`.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let bad = |reason: String| Error::Format {
        kind: "config",
        path: path.to_path_buf(),
        reason,
    };
    if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| bad(e.to_string()))
    } else {
        serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn layout_for(grid: GridShape, counts: Option<&UsizeList>, train_hw: Option<&UsizeList>, fixed: Option<&UsizeList>) -> Result<WindowLayout> {
    let policy = match fixed {
        Some(f) => {
            let [t, h, w] = f.exact("--fixed")?;
            WindowPolicy::Fixed(WindowSize::new(t, h, w)?)
        }
        None => {
            let [t, h, w] = counts.map_or(Ok([1, 3, 3]), |c| c.exact("--counts"))?;
            let train_hw = train_hw.map_or(Ok(DEFAULT_TRAIN_HW), |v| v.exact::<2>("--train-hw").map(|[a, b]| (a, b)))?;
            WindowPolicy::Adaptive {
                counts: WindowCounts::new(t, h, w)?,
                train_hw,
            }
        }
    };
    policy.layout(grid)
}

fn gen_data(a: &GenData) -> Result<()> {
    let [h, w] = a.hw.exact("--hw")?;
    let params = DegradationParams::default();
    fs::create_dir_all(&a.out)?;
    let pairs = held_out_set(a.seed, a.count, a.frames, (h, w), &params)?;
    for (i, p) in pairs.iter().enumerate() {
        p.hq.write(&a.out.join(format!("hq_{i:04}.wvc")))?;
        p.lq.write(&a.out.join(format!("lq_{i:04}.wvc")))?;
    }
    print_json(&serde_json::json!({ "count": a.count, "frames": a.frames, "hq_hw": [h, w], "out": a.out }))
}

fn run_pretrain(a: &PretrainArgs) -> Result<()> {
    let mut job: PretrainJob = match &a.config {
        Some(p) => read_config(p)?,
        None => PretrainJob::default(),
    };
    if let Some(n) = a.iters {
        job.pretrain.iters = n;
    }
    if let Some(s) = a.seed {
        job.pretrain.seed = s;
    }
    let mut model = Backbone::new(job.model.clone(), &mut ChaCha8Rng::seed_from_u64(job.pretrain.seed))?;
    let mut log = MetricsLog::to_file(&a.out.join("metrics.jsonl"))?;
    let trace = pretrain(&mut model, &job.pretrain, &mut log)?;
    save_backbone(
        &model,
        &a.out,
        &Manifest {
            config: job.model,
            step: job.pretrain.iters,
            stage: "pretrain".into(),
            kind: CheckpointKind::Teacher,
            sampling_steps: Some(64),
        },
    )?;
    print_json(&serde_json::json!({ "iters": trace.len(), "final_loss": trace.last() }))
}

fn run_distill(a: &DistillArgs) -> Result<()> {
    let (teacher, _) = load_backbone(&a.teacher)?;
    let mut cfg: DistillConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => DistillConfig::default(),
    };
    cfg.schedule = DistillSchedule {
        stage_steps: a.schedule.0.clone(),
        iters_per_stage: a.iters.unwrap_or(cfg.schedule.iters_per_stage),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let mut log = MetricsLog::to_file(&a.out.join("metrics.jsonl"))?;
    let (student, stages) = run_progressive(&teacher, &cfg, &mut log)?;
    let last = *cfg.schedule.stage_steps.last().unwrap();
    save_backbone(
        &student,
        &a.out,
        &Manifest {
            config: student.config().clone(),
            step: stages.len() * cfg.schedule.iters_per_stage,
            stage: format!("distill {}", cfg.schedule.stage_steps.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")),
            kind: CheckpointKind::Student,
            sampling_steps: Some(last),
        },
    )?;
    let summary: Vec<_> = stages
        .iter()
        .map(|s| {
            serde_json::json!({
                "steps_from": s.steps_from,
                "steps_to": s.steps_to,
                "teacher_cfg": s.teacher_cfg,
                "probe_mse_initial": s.probe_initial,
                "probe_mse_final": s.probe_final,
            })
        })
        .collect();
    print_json(&summary)
}

fn run_train_apt(a: &TrainAptArgs) -> Result<()> {
    let cfg: TrainConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    let (g, _) = load_backbone(&a.gen)?;
    let (d, _) = load_backbone(&a.disc)?;
    let mut log = MetricsLog::to_file(&a.out.join("metrics.jsonl"))?;
    let outcome = train_apt(&cfg, g, d, Some(&a.out), &mut log)?;
    let evals: Vec<_> = outcome
        .evals
        .iter()
        .map(|(it, e)| serde_json::json!({ "iter": it, "psnr": e.psnr, "ssim": e.ssim, "l1": e.l1 }))
        .collect();
    print_json(&evals)
}

fn run_restore(a: &RestoreArgs) -> Result<()> {
    let (model, _) = load_backbone(&a.ckpt)?;
    let lq = Clip::read(&a.input)?;
    let [h, w] = match &a.hw {
        Some(v) => v.exact("--hw")?,
        None => [lq.height * 4, lq.width * 4],
    };
    let sampler = SamplerConfig {
        steps: a.steps,
        cfg_scale: a.cfg,
        seed: a.seed,
    };
    let t0 = Instant::now();
    let out = restore_clip(&model, &lq, (h, w), &sampler)?;
    out.write(&a.out)?;
    print_json(&serde_json::json!({
        "out": a.out,
        "shape": out.shape(),
        "runtime_seconds": t0.elapsed().as_secs_f64(),
    }))
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let t0 = Instant::now();
    let pred = Clip::read(&a.pred)?;
    let reference = Clip::read(&a.reference)?;
    let layout = if a.counts.is_some() || a.train_hw.is_some() || a.fixed.is_some() {
        Some(layout_for(pred.grid(), a.counts.as_ref(), a.train_hw.as_ref(), a.fixed.as_ref())?)
    } else {
        None
    };
    let m = clip_metrics(&pred, &reference, layout.as_ref())?;
    print_json(&MetricReport::from_clips(vec![m], t0.elapsed().as_secs_f64()))
}

fn run_windows(a: &WindowsArgs) -> Result<()> {
    let [t, h, w] = a.grid.exact("--grid")?;
    let layout = layout_for(GridShape::new(t, h, w)?, Some(&a.counts), a.train_hw.as_ref(), a.fixed.as_ref())?;
    print_json(&layout)
}

fn run_plot_data(a: &PlotDataArgs) -> Result<()> {
    let (model, _) = load_backbone(&a.ckpt)?;
    let [h, w] = a.hw.exact("--hw")?;
    let pairs: Vec<Pair> = held_out_set(a.seed, a.count, 1, (h, w), &DegradationParams::default())?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "steps,psnr,ssim")?;
    for &steps in &a.steps.0 {
        let sampler = SamplerConfig {
            steps,
            cfg_scale: a.cfg,
            seed: a.seed,
        };
        let preds = restore_set(&model, &pairs, &sampler)?;
        let mut psnr_sum = 0.0;
        let mut ssim_sum = 0.0;
        let mut ssim_ok = true;
        for (p, pair) in preds.iter().zip(&pairs) {
            psnr_sum += crate::metrics::psnr(p, &pair.hq)?.min(PSNR_CAP);
            match ssim(p, &pair.hq) {
                Ok(s) => ssim_sum += s,
                Err(_) => ssim_ok = false,
            }
        }
        let n = pairs.len() as f64;
        let ssim_col = if ssim_ok { format!("{:.6}", ssim_sum / n) } else { String::new() };
        writeln!(out, "{steps},{:.6},{ssim_col}", psnr_sum / n)?;
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => run_pretrain(a),
        Command::Distill(a) => run_distill(a),
        Command::TrainApt(a) => run_train_apt(a),
        Command::Restore(a) => run_restore(a),
        Command::Eval(a) => run_eval(a),
        Command::Windows(a) => run_windows(a),
        Command::PlotData(a) => run_plot_data(a),
    };
    match result {
        Ok(()) => 0,
        Err(e @ Error::InvalidArgument(_)) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
