//! Pre-packaged experiment drivers: full runs with artifacts on disk, the
//! codec benchmark, the analytical check suite, the component/bit ablation
//! grid, and checkpoint probing.

use crate::checkpoint::{load_params, save_params};
use crate::config::{ExperimentConfig, ObjectiveKind};
use crate::csg::{cpr, dcpr, wire_len, QuantScheme};
use crate::nn::{param_count, EncoderModel, ParamVector};
use crate::probe::{linear_probe, ProbeReport};
use crate::sim::{
    metrics_csv, probe_run, run_federation, theory_check_convergence, theory_check_invariants,
    ConvergenceSweep, InvariantReport, RoundRecord,
};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Files and summaries produced by one archived run.
pub struct RunArtifacts {
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub config_path: PathBuf,
    pub records: Vec<RoundRecord>,
    pub probe: ProbeReport,
}

/// Runs the protocol and archives `metrics.csv`, `final.ckpt`, and
/// `resolved_config.txt` under `out_dir`, then scores the result with the
/// linear readout.
pub fn run_to_dir(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunArtifacts> {
    std::fs::create_dir_all(out_dir)?;
    let out = run_federation(cfg)?;
    let probe = probe_run(&out)?;

    let metrics_path = out_dir.join("metrics.csv");
    std::fs::write(&metrics_path, metrics_csv(&out.records))?;
    let checkpoint_path = out_dir.join("final.ckpt");
    save_params(&checkpoint_path, out.final_model.params())?;
    let config_path = out_dir.join("resolved_config.txt");
    std::fs::write(&config_path, cfg.resolved_text())?;

    Ok(RunArtifacts {
        metrics_path,
        checkpoint_path,
        config_path,
        records: out.records,
        probe,
    })
}

/// One bit width of the codec benchmark.
#[derive(Debug, Clone, Copy)]
pub struct CodecRow {
    pub bits: u8,
    pub bytes: usize,
    /// Wire size relative to the 32-bit passthrough.
    pub ratio: f64,
    /// Relative l2 reconstruction error, averaged over draws.
    pub mean_rel_error: f64,
}

pub const CODEC_BENCH_BITS: [u8; 6] = [32, 16, 8, 4, 2, 1];

/// Compresses standard-normal vectors of the configured model's size at
/// each benchmark width and reports wire size and reconstruction error.
pub fn codec_bench(cfg: &ExperimentConfig, trials: usize) -> Result<Vec<CodecRow>> {
    cfg.validate()?;
    if trials == 0 {
        return Err(Error::param("trials", "must be >= 1"));
    }
    let dim = param_count(&cfg.mode.model_dims(&cfg.model_dims));
    let full = wire_len(32, dim);
    let mut rows = Vec::with_capacity(CODEC_BENCH_BITS.len());
    for bits in CODEC_BENCH_BITS {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ u64::from(bits));
        let mut err_sum = 0.0;
        for _ in 0..trials {
            let g = ParamVector::new((0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect());
            let q = cpr(&g, bits, QuantScheme::Stochastic, &mut rng)?;
            let err = dcpr(&q).sub(&g)?.norm() / g.norm();
            err_sum += err;
        }
        let bytes = wire_len(bits, dim);
        rows.push(CodecRow {
            bits,
            bytes,
            ratio: bytes as f64 / full as f64,
            mean_rel_error: err_sum / trials as f64,
        });
    }
    Ok(rows)
}

pub fn codec_csv(rows: &[CodecRow]) -> String {
    let mut out = String::from("bits,bytes,ratio_vs_full,mean_rel_error\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.8e},{:.8e}\n",
            r.bits, r.bytes, r.ratio, r.mean_rel_error
        ));
    }
    out
}

/// One configuration of the ablation grid.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: String,
    pub scg: bool,
    pub sst: bool,
    pub distill: bool,
    pub bits: u8,
    pub probe_accuracy: f64,
    pub final_ssl_loss: f64,
    pub uplink_bytes: u64,
}

fn ablation_variant(base: &ExperimentConfig, scg: bool, sst: bool, distill: bool, bits: u8) -> ExperimentConfig {
    let mut cfg = base.clone();
    if !scg {
        cfg.scg.lambda = 0.0;
    }
    if !sst {
        cfg.scg.sst_weight = 0.0;
    }
    if !distill {
        cfg.distill_steps = 0;
    }
    cfg.bits = bits;
    cfg
}

/// The full 2x2x2 component grid at the base bit width, then a bit sweep
/// with every component on: twelve configurations, fixed order.
pub fn ablation_plan(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig, (bool, bool, bool, u8))> {
    let mut plan = Vec::with_capacity(12);
    for (scg, sst, distill) in [
        (true, true, true),
        (false, true, true),
        (true, false, true),
        (true, true, false),
        (false, false, true),
        (false, true, false),
        (true, false, false),
        (false, false, false),
    ] {
        let mut name = String::from("full");
        if !(scg && sst && distill) {
            let mut off = Vec::new();
            if !scg {
                off.push("scg");
            }
            if !sst {
                off.push("sst");
            }
            if !distill {
                off.push("distill");
            }
            name = format!("no_{}", off.join("_"));
        }
        plan.push((
            name,
            ablation_variant(base, scg, sst, distill, base.bits),
            (scg, sst, distill, base.bits),
        ));
    }
    for bits in [32u8, 8, 2, 1] {
        plan.push((
            format!("bits{bits}"),
            ablation_variant(base, true, true, true, bits),
            (true, true, true, bits),
        ));
    }
    plan
}

pub fn run_ablation(base: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let mut rows = Vec::new();
    for (name, cfg, (scg, sst, distill, bits)) in ablation_plan(base) {
        let out = run_federation(&cfg)?;
        let probe = probe_run(&out)?;
        rows.push(AblationRow {
            name,
            scg,
            sst,
            distill,
            bits,
            probe_accuracy: probe.test_accuracy,
            final_ssl_loss: out.records.last().map(|r| r.mean_ssl_loss).unwrap_or(f64::NAN),
            uplink_bytes: out.records.iter().map(|r| r.uplink_bytes).sum(),
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "name,scg,sst,distill,bits,probe_accuracy,final_ssl_loss,total_uplink_bytes\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.8e},{:.8e},{}\n",
            r.name,
            r.scg as u8,
            r.sst as u8,
            r.distill as u8,
            r.bits,
            r.probe_accuracy,
            r.final_ssl_loss,
            r.uplink_bytes
        ));
    }
    out
}

/// Outcome of the analytical check suite.
pub struct TheoryReport {
    pub invariants: InvariantReport,
    pub sweep: ConvergenceSweep,
    pub monotone_seeds: usize,
    pub total_seeds: usize,
    /// Seed-averaged values non-increasing across the horizons.
    pub trend_ok: bool,
}

pub const THEORY_HORIZONS: [usize; 3] = [25, 100, 400];
pub const THEORY_SEEDS: usize = 10;

/// Derives the small quadratic configuration the convergence sweep runs
/// on, keeping the caller's seed and compression settings.
pub fn convergence_base(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut base = cfg.clone();
    base.objective = ObjectiveKind::Quadratic;
    base.model_dims = vec![16, 8];
    base.clients = cfg.clients.min(8);
    base.samples_per_client = vec![4];
    base.public_samples = 4;
    base.local_epochs = 1;
    base.participation = 1.0;
    base.distill_steps = 0;
    base.uni_pretrain_steps = 0;
    base
}

/// Runs both per-run analytical checks on the given configuration plus the
/// horizon sweep on the derived quadratic surrogate.
pub fn run_theory_checks(
    cfg: &ExperimentConfig,
    horizons: &[usize],
    seeds: usize,
) -> Result<TheoryReport> {
    let invariants = theory_check_invariants(cfg, 1e-9)?;
    let sweep = theory_check_convergence(&convergence_base(cfg), horizons, seeds)?;
    let trend_ok = sweep
        .points
        .windows(2)
        .all(|w| w[1].mean_grad_sq <= w[0].mean_grad_sq);
    Ok(TheoryReport {
        invariants,
        monotone_seeds: sweep.monotone_seeds(),
        total_seeds: seeds,
        trend_ok,
        sweep,
    })
}

pub fn convergence_csv(sweep: &ConvergenceSweep) -> String {
    let mut out = String::from("rounds,gamma,mean_grad_sq\n");
    for p in &sweep.points {
        out.push_str(&format!("{},{:.8e},{:.8e}\n", p.rounds, p.gamma, p.mean_grad_sq));
    }
    out
}

/// Loads encoder parameters from a checkpoint and scores them with the
/// linear readout of the given configuration.
pub fn probe_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<ProbeReport> {
    cfg.validate()?;
    let params = load_params(checkpoint)?;
    let dims = cfg.mode.model_dims(&cfg.model_dims);
    let expected = param_count(&dims);
    if params.dim() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters but the configured model needs {expected}",
            params.dim()
        )));
    }
    let model = EncoderModel::new(dims, params)?;
    linear_probe(
        &model,
        cfg.mode,
        cfg.domains,
        &cfg.probe,
        cfg.seed ^ crate::sim::PROBE_STREAM,
    )
}
