//! Subcommands of the `msgnet` binary, callable as a library.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use msgnet_core::apl::gamma_table_csv;
use msgnet_core::bench::{run_bench, BenchConfig};
use msgnet_core::config::{Precision, RunConfig};
use msgnet_core::gradsuite::{run_suite, SuiteReport};
use msgnet_core::synth::{load_split, make_dataset, write_dataset, Split, SynthConfig};
use msgnet_core::tensor::BackwardFault;
use msgnet_core::train::{load_checkpoint, predict, save_checkpoint, train, EpochLog, EvalReport};
use msgnet_core::{Error, Real, Result};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "msgnet",
    version,
    about = "Sparse graph RGB-thermal detection toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference check of every op and module; exits 1 on failure.
    Gradcheck(GradcheckArgs),
    /// λ → γ mapping over λ ∈ [0, 1.5] in steps of 0.01, as CSV.
    GammaTable(OutArg),
    /// Generates a synthetic misaligned RGB-thermal split.
    SynthGen(SynthArgs),
    /// Trains on a generated dataset and writes metrics and a checkpoint.
    TrainToy(TrainArgs),
    /// Scores a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Sparse versus dense aggregation cost table.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Write to this file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArg,
    /// Scales one op's backward rule, as `OP:FACTOR`. Test fixture only.
    #[arg(long, hide = true, value_parser = parse_fault)]
    pub inject_fault: Option<BackwardFault>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    /// Dataset root; the split is written to `<out>/<split>`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: Split,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 32)]
    pub thermal_size: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides a config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root; defaults to the one the checkpoint was trained on.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    pub split: Split,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "64,256,1024")]
    pub nodes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "10,25,50,100")]
    pub k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75")]
    pub tau: Vec<f64>,
    /// Also measure wall-clock time (makes the report machine-dependent).
    #[arg(long)]
    pub timing: bool,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[command(flatten)]
    pub out: OutArg,
}

fn parse_fault(s: &str) -> std::result::Result<BackwardFault, String> {
    let (op, factor) = s.split_once(':').unwrap_or((s, "2"));
    let factor = f64::from_str(factor).map_err(|e| e.to_string())?;
    // Op names are compared against static names inside the tape.
    let op: &'static str = Box::leak(op.to_string().into_boxed_str());
    Ok(BackwardFault { op, factor })
}

fn emit(out: &OutArg, text: &str) -> Result<()> {
    match &out.out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, text)?;
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn json<S: Serialize>(value: &S) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// Outcome of a subcommand: the exit code it asks for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    Failed,
}

pub fn run(cli: Cli) -> Result<Status> {
    match cli.command {
        Command::Gradcheck(a) => gradcheck(&a),
        Command::GammaTable(out) => emit(&out, &gamma_table_csv()).map(|_| Status::Ok),
        Command::SynthGen(a) => synth_gen(&a).map(|_| Status::Ok),
        Command::TrainToy(a) => train_toy(&a).map(|_| Status::Ok),
        Command::Eval(a) => {
            let report = eval(&a.checkpoint, a.data.as_deref(), a.split)?;
            emit(&a.out, &json(&report)?)?;
            Ok(Status::Ok)
        }
        Command::Bench(a) => {
            let cfg = BenchConfig {
                seed: a.seed,
                nodes: a.nodes.clone(),
                k: a.k.clone(),
                tau: a.tau.clone(),
                timing: a.timing,
                repeats: a.repeats,
                ..BenchConfig::default()
            };
            emit(&a.out, &json(&run_bench(&cfg)?)?)?;
            Ok(Status::Ok)
        }
    }
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<Status> {
    let report: SuiteReport = run_suite(a.seed, a.inject_fault)?;
    emit(&a.out, &json(&report)?)?;
    for e in report.entries.iter().filter(|e| !e.pass) {
        eprintln!(
            "FAIL {} rel err {:.3e} > {:.0e}",
            e.name, e.max_rel_err, e.tolerance
        );
    }
    Ok(if report.all_pass {
        Status::Ok
    } else {
        Status::Failed
    })
}

pub fn synth_gen(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        canvas: a.image_size,
        thermal: a.thermal_size,
        ..SynthConfig::default()
    };
    let samples = make_dataset(a.n, a.seed, a.split, &cfg)?;
    write_dataset(&a.out, a.split, &samples)
}

/// Loads the config file and applies `key=value` overrides.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    let mut cfg = RunConfig::parse(&text)?;
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Format {
            what: "override",
            msg: format!("expected key=value, got {o:?}"),
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const EVAL_FILE: &str = "eval.json";

/// Trains per the config, writing `metrics.csv` (one row per epoch),
/// `checkpoint/` and `eval.json` (validation report) under `cfg.out`.
pub fn train_toy(a: &TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config, &a.overrides)?;
    match cfg.precision {
        Precision::F32 => train_as::<f32>(&cfg),
        Precision::F64 => train_as::<f64>(&cfg),
    }
}

fn train_as<T: Real>(cfg: &RunConfig) -> Result<()> {
    let train_set = load_split(&cfg.data, Split::Train)?;
    let val_dir = cfg.data.join(Split::Val.as_str());
    let val_set = if val_dir.is_dir() {
        load_split(&cfg.data, Split::Val)?
    } else {
        Vec::new()
    };
    fs::create_dir_all(&cfg.out)?;
    let mut metrics = fs::File::create(cfg.out.join(METRICS_FILE))?;
    writeln!(metrics, "{}", EpochLog::CSV_HEADER)?;
    let trained = train::<T>(cfg, &train_set, &val_set, |log, _, _| {
        writeln!(metrics, "{}", log.csv_row())?;
        metrics.flush()?;
        eprintln!(
            "epoch {} total {:.4} val_ap50 {:.3}",
            log.epoch, log.total, log.val_ap50
        );
        Ok(())
    })?;
    save_checkpoint(&cfg.out.join(CHECKPOINT_DIR), cfg, &trained.params)?;
    let val = if val_set.is_empty() {
        &train_set
    } else {
        &val_set
    };
    let report = predict(&trained.model, &trained.params, val)?.report;
    fs::write(cfg.out.join(EVAL_FILE), json(&report)?)?;
    Ok(())
}

pub fn eval(checkpoint: &Path, data: Option<&Path>, split: Split) -> Result<EvalReport> {
    let text = fs::read_to_string(checkpoint.join(msgnet_core::train::CONFIG_FILE))?;
    match RunConfig::parse(&text)?.precision {
        Precision::F32 => eval_as::<f32>(checkpoint, data, split),
        Precision::F64 => eval_as::<f64>(checkpoint, data, split),
    }
}

fn eval_as<T: Real>(checkpoint: &Path, data: Option<&Path>, split: Split) -> Result<EvalReport> {
    let (cfg, model, ps) = load_checkpoint::<T>(checkpoint)?;
    let samples = load_split(data.unwrap_or(&cfg.data), split)?;
    Ok(predict(&model, &ps, &samples)?.report)
}
