//! The `hfr` command line.
//!
//! Exit codes: 0 success, 1 bad input (config, arguments, files),
//! 2 training or sweep failure, 3 gradient check failure.

pub mod config;
pub mod pipeline;
pub mod weights;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::error::{Error, Result};
use crate::gradcheck;
use crate::losses::LossWeights;
use crate::miniedge::Model;
use crate::partition::{self, AdaptConfig};
use crate::trainer::{Protocol, TrainConfig};
use config::RunConfig;
use pipeline::Workspace;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_TRAINING: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "hfr", version, about = "Cross-modal adaptation of a small LayerNorm CNN-Transformer")]
pub struct Cli {
    /// Print the default configuration as JSON and exit.
    #[arg(long)]
    pub print_defaults: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a fresh backbone on the source modality.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a pretrained model to the target modality.
    Adapt {
        #[arg(long)]
        pretrained: PathBuf,
        /// Comma-separated groups (LN, ST, S0, S1, S2), or "" / "baseline".
        #[arg(long)]
        layers: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV; defaults to OUT with a .csv extension.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Evaluate a model on held-out identities.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "cross")]
        protocol: Protocol,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Evaluate one fold only; all folds by default.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Pretrain once, then sweep adapted layer sets and/or λ values.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Semicolon-separated layer sets, e.g. "baseline;LN;LN,ST".
        #[arg(long)]
        layers_sweep: Option<String>,
        /// Comma-separated λ values.
        #[arg(long)]
        lambda_sweep: Option<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Finite-difference check of every op and the full objective.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        /// Breaks the named case's backward to exercise the harness.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Parameter and multiply-accumulate counts.
    Complexity {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Maps a library error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } | Error::NonFiniteGradient(_) => EXIT_TRAINING,
        _ => EXIT_INPUT,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_INPUT
            } else {
                EXIT_OK
            }
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    if cli.print_defaults {
        println!("{}", RunConfig::default().to_json_pretty());
        return EXIT_OK;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (see hfr --help)");
        return EXIT_INPUT;
    };
    let result = match command {
        Command::Pretrain { config, out } => pretrain(config.as_deref(), &out),
        Command::Adapt {
            pretrained,
            layers,
            lambda,
            margin,
            config,
            out,
            log,
            fold,
        } => {
            let log = log.unwrap_or_else(|| out.with_extension("csv"));
            adapt(&pretrained, layers, lambda, margin, config.as_deref(), &out, &log, fold)
        }
        Command::Eval {
            model,
            protocol,
            config,
            report,
            fold,
        } => eval(&model, protocol, config.as_deref(), &report, fold),
        Command::Ablate {
            config,
            layers_sweep,
            lambda_sweep,
            out_dir,
        } => ablate(config.as_deref(), layers_sweep, lambda_sweep, &out_dir),
        Command::Gradcheck { seeds, corrupt } => return gradcheck(seeds, corrupt.as_deref()),
        Command::Complexity { config } => complexity(config.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value serializes"));
}

fn pretrain(config: Option<&Path>, out: &Path) -> Result<i32> {
    let ws = Workspace::new(RunConfig::load_or_default(config)?)?;
    let model = ws.pretrain()?;
    weights::save(&model, out)?;
    let (source, cross) = ws.gap(&model)?;
    print_json(&json!({
        "out": out.display().to_string(),
        "source_eer": source,
        "cross_eer": cross,
    }));
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
fn adapt(
    pretrained: &Path,
    layers: Option<String>,
    lambda: Option<f64>,
    margin: Option<f64>,
    config: Option<&Path>,
    out: &Path,
    log_path: &Path,
    fold: usize,
) -> Result<i32> {
    let mut cfg = RunConfig::load_or_default(config)?;
    if let Some(l) = layers {
        cfg.train.adapt_layers = l;
    }
    if let Some(l) = lambda {
        cfg.train.lambda = l;
    }
    if let Some(m) = margin {
        cfg.train.margin = m;
    }
    let ws = Workspace::new(cfg)?;
    let train = ws.config.train_config()?;
    let base = weights::load(&ws.backbone, pretrained)?;
    let (model, log) = ws.adapt(&base, fold, &train)?;
    let intact = partition::verify_frozen(&base, &model, &train.adapt)?.is_intact();
    weights::save(&model, out)?;
    log.save_csv(log_path)?;
    let last = log.steps.last();
    print_json(&json!({
        "out": out.display().to_string(),
        "log": log_path.display().to_string(),
        "fold": fold,
        "layers": train.adapt.to_string(),
        "lambda": train.weights.lambda,
        "margin": train.weights.margin,
        "steps": log.steps.len(),
        "final_l_c": last.map(|r| r.l_c),
        "final_l_sdl": last.map(|r| r.l_sdl),
        "final_l_total": last.map(|r| r.l_total),
        "frozen_intact": intact,
        "partition": log.partition,
        "wall_time_secs": log.wall_time_secs,
    }));
    Ok(if intact { EXIT_OK } else { EXIT_TRAINING })
}

fn eval(model: &Path, protocol: Protocol, config: Option<&Path>, report: &Path, fold: Option<usize>) -> Result<i32> {
    let ws = Workspace::new(RunConfig::load_or_default(config)?)?;
    let model = weights::load(&ws.backbone, model)?;
    let summary = ws.evaluate(&model, protocol, fold)?;
    let text = serde_json::to_string_pretty(&summary)?;
    std::fs::write(report, format!("{text}\n"))?;
    println!("{text}");
    Ok(EXIT_OK)
}

/// One CSV row per cell: `config,AUC,EER,Rank-1,VR@FAR=1%` (fold means).
struct SweepTable {
    rows: Vec<(String, [f64; 4])>,
}

impl SweepTable {
    fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["config", "AUC", "EER", "Rank-1", "VR@FAR=1%"])?;
        for (label, m) in &self.rows {
            let mut rec = vec![label.clone()];
            rec.extend(m.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn parse_lambdas(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            let t = t.trim();
            t.parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("bad λ value {t:?}")))
                .and_then(|l| LossWeights::new(l, 0.0).map(|_| l))
        })
        .collect()
}

fn ablate(config: Option<&Path>, layers: Option<String>, lambdas: Option<String>, out_dir: &Path) -> Result<i32> {
    let ws = Workspace::new(RunConfig::load_or_default(config)?)?;
    let layer_sets = layers
        .as_deref()
        .map(|s| s.split(';').map(str::parse::<AdaptConfig>).collect::<Result<Vec<_>>>())
        .transpose()?;
    let lambda_values = lambdas.as_deref().map(parse_lambdas).transpose()?;
    if layer_sets.as_ref().map_or(true, Vec::is_empty) && lambda_values.as_ref().map_or(true, Vec::is_empty) {
        return Err(Error::InvalidConfig("give --layers-sweep and/or --lambda-sweep".into()));
    }
    if !ws.config.eval.far_targets.contains(&1e-2) {
        return Err(Error::InvalidConfig("ablation tables need 0.01 in eval.far_targets".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let base = ws.config.train_config()?;
    let pretrained = ws.pretrain()?;
    weights::save(&pretrained, &out_dir.join("pretrained.xefw"))?;

    let mut failures = Vec::new();
    let mut sweep = |name: &str, cells: Vec<(String, TrainConfig)>| -> Result<()> {
        let mut table = SweepTable { rows: Vec::new() };
        for (label, train) in cells {
            match run_cell(&ws, &pretrained, &train) {
                Ok(m) => {
                    eprintln!("{name} {label}: EER {:.4}", m[1]);
                    table.rows.push((label, m));
                }
                Err(e) => {
                    eprintln!("{name} {label}: failed: {e}");
                    failures.push(format!("{name},{label},{e}"));
                }
            }
        }
        table.save(&out_dir.join(format!("{name}.csv")))
    };
    if let Some(sets) = layer_sets.filter(|s| !s.is_empty()) {
        let cells = sets
            .into_iter()
            .map(|adapt| (adapt.to_string(), TrainConfig { adapt, ..base.clone() }))
            .collect();
        sweep("layers", cells)?;
    }
    if let Some(values) = lambda_values.filter(|v| !v.is_empty()) {
        let cells = values
            .into_iter()
            .map(|l| {
                let weights = LossWeights { lambda: l, ..base.weights };
                (format!("{l:.2}"), TrainConfig { weights, ..base.clone() })
            })
            .collect();
        sweep("lambda", cells)?;
    }
    if failures.is_empty() {
        Ok(EXIT_OK)
    } else {
        std::fs::write(out_dir.join("failures.txt"), failures.join("\n") + "\n")?;
        Ok(EXIT_TRAINING)
    }
}

/// Adapts on every fold and returns fold-mean (AUC, EER, Rank-1, VR@1%).
fn run_cell(ws: &Workspace, pretrained: &Model, train: &TrainConfig) -> Result<[f64; 4]> {
    let mut reports = Vec::new();
    for k in 0..ws.split.folds.len() {
        let (model, _) = ws.adapt(pretrained, k, train)?;
        reports.extend(ws.evaluate(&model, Protocol::Cross, Some(k))?.folds);
    }
    let s = crate::metrics::aggregate_folds(&reports)?;
    Ok([s.mean.auc, s.mean.eer, s.mean.rank1, s.mean.vr(1e-2).unwrap_or(f64::NAN)])
}

fn gradcheck(seeds: usize, corrupt: Option<&str>) -> i32 {
    if seeds == 0 {
        eprintln!("error: --seeds must be positive");
        return EXIT_INPUT;
    }
    if let Some(c) = corrupt.filter(|c| !gradcheck::CASES.contains(c)) {
        eprintln!("error: unknown case {c:?}");
        return EXIT_INPUT;
    }
    let results = match gradcheck::run_suite(seeds, corrupt) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_GRADCHECK;
        }
    };
    println!("{:<18} {:>6} {:>8} {:>14}  status", "op", "seeds", "coords", "max_rel_error");
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<18} {:>6} {:>8} {:>14.3e}  {status}", r.op, r.seeds, r.coordinates, r.max_rel_error);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
    if failed.is_empty() {
        EXIT_OK
    } else {
        eprintln!("gradient check failed (tolerance {:e}): {}", gradcheck::TOLERANCE, failed.join(", "));
        EXIT_GRADCHECK
    }
}

fn complexity(config: Option<&Path>) -> Result<i32> {
    let cfg = RunConfig::load_or_default(config)?;
    let model = Model::build(&cfg.backbone()?, 0)?;
    let count = model.count_parameters();
    let per_group: BTreeMap<String, u64> = count.per_group.iter().map(|(g, n)| (g.to_string(), *n)).collect();
    print_json(&json!({
        "params_total": count.total,
        "params_per_group": per_group,
        "macs_per_sample": model.estimate_flops(),
    }));
    Ok(EXIT_OK)
}
