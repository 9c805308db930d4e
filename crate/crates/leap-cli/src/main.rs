//! Command-line front end for the embedding-augmentation library.
//!
//! Subcommands: `gen-data`, `train`, `eval`, `stats`, `verify-bound`.
//! All outputs are JSON or CSV; every run is fully determined by the
//! config file plus flags (no ambient entropy), so repeated invocations
//! produce byte-identical artifacts.

mod config;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use leap::datagen::{self, Dataset, Split};
use leap::eval::{evaluate_retrieval, measure_variances};
use leap::sphere::{verify_angle_bound, Angle, UnitVector};
use leap::trainer::{load_checkpoint, resume, save_checkpoint, train, Checkpoint};

use config::{apply_preset, parse_config, validate, RunConfig};

#[derive(Parser)]
#[command(name = "leap", about = "long-tailed embedding augmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Sectioned key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides [output] dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides both the dataset and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to resume from (train) or to inspect (eval, stats).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Named preset overlay, e.g. reid-defaults or leap-cosface-full.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed dataset.
    GenData(CommonArgs),
    /// Train an embedding and write the log, checkpoint, and stats.
    Train(CommonArgs),
    /// Evaluate a checkpoint: retrieval metrics and variance report.
    Eval(CommonArgs),
    /// Print and save the statistics snapshot of a checkpoint.
    Stats(CommonArgs),
    /// Monte-Carlo check of the perturbed-angle bounds over a grid.
    VerifyBound(CommonArgs),
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Validation(Vec<String>),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Validation(_) => ExitCode::from(1),
            CliError::Runtime(_) => ExitCode::from(2),
            CliError::Verification(_) => ExitCode::from(3),
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Stats(a) => cmd_stats(a),
        Command::VerifyBound(a) => cmd_verify_bound(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Config file -> preset overlay -> flag overrides -> validation.
fn load_config(args: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
            parse_config(&text).map_err(CliError::Validation)?
        }
        None => RunConfig::default(),
    };
    if let Some(preset) = &args.preset {
        apply_preset(&mut cfg, preset).map_err(|e| CliError::Validation(vec![e]))?;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.dataset.seed = seed;
        cfg.train.seed = seed;
        cfg.verify.seed = seed;
    }
    validate(&cfg).map_err(CliError::Validation)?;
    Ok(cfg)
}

/// Loads the dataset from `data_dir` if configured (or already written
/// to the output directory by `gen-data`); otherwise generates it.
fn obtain_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    if let Some(dir) = &cfg.data_dir {
        return datagen::load(dir).map_err(runtime);
    }
    if cfg.out_dir.join("manifest.json").exists() {
        return datagen::load(&cfg.out_dir).map_err(runtime);
    }
    datagen::generate(&cfg.dataset).map_err(runtime)
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    fs::write(path, text).map_err(runtime)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_gen_data(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dataset = datagen::generate(&cfg.dataset).map_err(|e| {
        // an infeasible spec is a configuration problem, not a crash
        use leap::datagen::DatagenError;
        match &e {
            DatagenError::InfeasibleSpec(_) => CliError::Validation(vec![e.to_string()]),
            _ => runtime(e),
        }
    })?;
    datagen::save(&dataset, &cfg.out_dir).map_err(runtime)?;
    println!("wrote {}", cfg.out_dir.join("data.bin").display());
    println!("wrote {}", cfg.out_dir.join("manifest.json").display());
    println!(
        "classes={} train={} query={} gallery={}",
        dataset.manifest.num_classes,
        dataset.manifest.train_count,
        dataset.manifest.query_count,
        dataset.manifest.gallery_count
    );
    Ok(())
}

fn cmd_train(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dataset = obtain_dataset(&cfg)?;
    let (checkpoint, log) = match &args.resume {
        Some(path) => {
            let cp = load_checkpoint(path).map_err(runtime)?;
            resume(cp, &dataset, &cfg.train)
        }
        None => train(&dataset, &cfg.train),
    }
    .map_err(|e| match e {
        leap::trainer::TrainError::Config(errs) => CliError::Validation(errs),
        other => runtime(other),
    })?;

    fs::create_dir_all(&cfg.out_dir).map_err(runtime)?;
    let log_path = cfg.out_dir.join("train_log.csv");
    fs::write(&log_path, log.to_csv()).map_err(runtime)?;
    println!("wrote {}", log_path.display());
    let ckpt_path = cfg.out_dir.join("final.ckpt");
    save_checkpoint(&checkpoint, &ckpt_path).map_err(runtime)?;
    println!("wrote {}", ckpt_path.display());
    write_json(&checkpoint.stats.snapshot(), &cfg.out_dir.join("stats.json"))?;
    if let Some(last) = log.rows.last() {
        println!(
            "final epoch={} loss={:.6} head_sigma2={:.6} tail_sigma2={:.6}",
            last.epoch, last.loss, last.head_sigma2_mean, last.tail_sigma2_mean
        );
    }
    Ok(())
}

fn load_run_checkpoint(args: &CommonArgs, cfg: &RunConfig) -> Result<Checkpoint, CliError> {
    let path = args
        .resume
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("final.ckpt"));
    load_checkpoint(&path)
        .map_err(|e| CliError::Runtime(format!("cannot load {}: {e}", path.display())))
}

fn cmd_eval(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dataset = obtain_dataset(&cfg)?;
    let checkpoint = load_run_checkpoint(args, &cfg)?;

    let embed = |split: Split| -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for s in dataset.by_split(split) {
            feats.push(checkpoint.model.forward(&s.input));
            labels.push(s.label);
        }
        (feats, labels)
    };
    let (query_f, query_l) = embed(Split::Query);
    let (gallery_f, gallery_l) = embed(Split::Gallery);
    let (train_f, train_l) = embed(Split::Train);

    let retrieval =
        evaluate_retrieval(&query_f, &query_l, &gallery_f, &gallery_l).map_err(runtime)?;
    let head_set: BTreeSet<usize> = (0..dataset.manifest.spec.num_head).collect();
    let variances = measure_variances(&train_f, &train_l, &head_set).map_err(runtime)?;

    fs::create_dir_all(&cfg.out_dir).map_err(runtime)?;
    write_json(&retrieval, &cfg.out_dir.join("retrieval.json"))?;
    write_json(&variances, &cfg.out_dir.join("variances.json"))?;
    println!(
        "rank1={:.4} map={:.4} head_sigma2={:.6} tail_sigma2={:.6}",
        retrieval.rank1, retrieval.map, variances.head_mean_sigma2, variances.tail_mean_sigma2
    );
    Ok(())
}

fn cmd_stats(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let checkpoint = load_run_checkpoint(args, &cfg)?;
    let snapshot = checkpoint.stats.snapshot();
    let text = serde_json::to_string_pretty(&snapshot).map_err(runtime)?;
    println!("{text}");
    fs::create_dir_all(&cfg.out_dir).map_err(runtime)?;
    fs::write(cfg.out_dir.join("stats.json"), &text).map_err(runtime)?;
    Ok(())
}

fn cmd_verify_bound(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let v = &cfg.verify;
    let mut rng = ChaCha8Rng::seed_from_u64(v.seed);
    let mut total_violations = 0usize;
    println!("dim\ttheta\talpha\tlower\tupper\tobs_min\tobs_max\tviolations");
    for &dim in &v.dims {
        for &theta in &v.thetas {
            for &alpha in &v.alphas {
                if theta + alpha > std::f64::consts::PI {
                    println!("{dim}\t{theta}\t{alpha}\tskipped: theta+alpha > pi");
                    continue;
                }
                // pair of unit vectors at exactly `theta` in a fixed plane
                let f = UnitVector::basis(dim, 0);
                let mut w_raw = vec![0.0; dim];
                w_raw[0] = theta.cos();
                w_raw[1] = theta.sin();
                let w = UnitVector::normalize(&w_raw).map_err(runtime)?;
                let a = Angle::clip(alpha).map_err(runtime)?;
                let report = verify_angle_bound(&f, &w, a, v.trials, &mut rng).map_err(runtime)?;
                println!(
                    "{dim}\t{theta}\t{alpha}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
                    report.lower_bound,
                    report.upper_bound,
                    report.observed_min,
                    report.observed_max,
                    report.violations
                );
                total_violations += report.violations;
            }
        }
    }
    if total_violations > 0 {
        return Err(CliError::Verification(format!(
            "{total_violations} bound violations observed"
        )));
    }
    println!("all bounds hold");
    Ok(())
}
