use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedsense::config::ExperimentConfig;
use fedsense::experiments::{
    self, ablation_csv, codec_csv, convergence_csv, run_ablation, run_to_dir, THEORY_HORIZONS,
    THEORY_SEEDS,
};
use fedsense::{Error, Result};

const CODEC_TRIALS: usize = 5;

#[derive(Parser)]
#[command(name = "fedsense", version, about = "Federated self-supervised training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the federation and write metrics, checkpoint, and resolved config
    Run(CommonArgs),
    /// Measure codec size and reconstruction error across bit widths
    CodecBench(CommonArgs),
    /// Check perturbation norms, error-memory bounds, and the horizon trend
    TheoryCheck(CommonArgs),
    /// Run the component and bit-width ablation grid
    Ablate(CommonArgs),
    /// Score a saved checkpoint with a linear readout
    Probe(ProbeArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Config file of key = value lines
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a single config key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory for output artifacts
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Override the run seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint file holding the encoder parameters
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::CodecBench(args) => cmd_codec_bench(&args),
        Command::TheoryCheck(args) => cmd_theory_check(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Probe(args) => cmd_probe(&args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// Precedence, lowest to highest: defaults, --config file, FEDSENSE_THREADS,
/// --set overrides, --seed.
fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Ok(raw) = std::env::var("FEDSENSE_THREADS") {
        let threads: usize = raw.trim().parse().map_err(|_| {
            Error::param("FEDSENSE_THREADS", "must be a non-negative integer")
        })?;
        cfg.threads = threads;
    }
    for pair in &common.set {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            Error::param("--set", "expected KEY=VALUE")
        })?;
        cfg.apply(key.trim(), value.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(args: &CommonArgs) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    let artifacts = run_to_dir(&cfg, &args.out)?;
    let last = artifacts
        .records
        .last()
        .ok_or_else(|| Error::param("run.rounds", "must be at least 1"))?;
    let uplink: u64 = artifacts.records.iter().map(|r| r.uplink_bytes).sum();
    println!("wrote {}", artifacts.metrics_path.display());
    println!("wrote {}", artifacts.checkpoint_path.display());
    println!("wrote {}", artifacts.config_path.display());
    println!(
        "rounds={} final_ssl_loss={:.6} final_grad_sq={:.6e} total_uplink_bytes={}",
        artifacts.records.len(),
        last.mean_ssl_loss,
        last.global_grad_norm_sq,
        uplink
    );
    println!(
        "probe_train_accuracy={:.4} probe_test_accuracy={:.4}",
        artifacts.probe.train_accuracy, artifacts.probe.test_accuracy
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_codec_bench(args: &CommonArgs) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    let rows = experiments::codec_bench(&cfg, CODEC_TRIALS)?;
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("codec_bench.csv");
    std::fs::write(&path, codec_csv(&rows))?;
    for row in &rows {
        println!(
            "bits={} bytes={} ratio_vs_full={:.4} mean_rel_error={:.6}",
            row.bits, row.bytes, row.ratio, row.mean_rel_error
        );
    }
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_theory_check(args: &CommonArgs) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    match experiments::run_theory_checks(&cfg, &THEORY_HORIZONS, THEORY_SEEDS) {
        Ok(report) => {
            std::fs::create_dir_all(&args.out)?;
            let path = args.out.join("convergence.csv");
            std::fs::write(&path, convergence_csv(&report.sweep))?;
            println!(
                "PASS perturbation-norm checked={} active={} max_deviation={:.3e}",
                report.invariants.perturbation.checked,
                report.invariants.perturbation.active,
                report.invariants.perturbation.max_deviation
            );
            println!(
                "PASS error-bound checked={} max_violation={:.3e}",
                report.invariants.error_bound.checked, report.invariants.error_bound.max_violation
            );
            let means: Vec<String> = report
                .sweep
                .points
                .iter()
                .map(|p| format!("{:.6e}", p.mean_grad_sq))
                .collect();
            let trend = if report.trend_ok { "PASS" } else { "FAIL" };
            println!(
                "{} horizon-trend monotone_seeds={}/{} means={}",
                trend,
                report.monotone_seeds,
                report.total_seeds,
                means.join(",")
            );
            println!("wrote {}", path.display());
            if report.trend_ok {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(1))
            }
        }
        Err(e) => {
            println!("FAIL theory-check {e}");
            Ok(ExitCode::from(1))
        }
    }
}

fn cmd_ablate(args: &CommonArgs) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    let rows = run_ablation(&cfg)?;
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("ablation.csv");
    std::fs::write(&path, ablation_csv(&rows))?;
    for row in &rows {
        println!(
            "name={} bits={} probe_accuracy={:.4} final_ssl_loss={:.6} uplink_bytes={}",
            row.name, row.bits, row.probe_accuracy, row.final_ssl_loss, row.uplink_bytes
        );
    }
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_probe(args: &ProbeArgs) -> Result<ExitCode> {
    let cfg = load_config(&args.common)?;
    let report = experiments::probe_checkpoint(&cfg, &args.checkpoint)?;
    println!(
        "probe_train_accuracy={:.4} probe_test_accuracy={:.4} classes={}",
        report.train_accuracy, report.test_accuracy, report.classes
    );
    Ok(ExitCode::SUCCESS)
}
