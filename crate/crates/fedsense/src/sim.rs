//! Round orchestration: broadcast, local training, compressed uplink,
//! aggregation, clustered distillation, and metrics.
//!
//! Determinism contract: every stochastic subsystem owns a tagged stream
//! derived from the run seed, so disabling one feature never shifts the
//! draws of another. Client `m` trains and compresses from the stream
//! seeded `seed ^ m`; data generation, model init, universal-encoder
//! pretraining, server-side draws (participation, cluster seeding), the
//! gradient metric, and quadratic targets each use their own constant tag.
//! A client that sits a round out consumes nothing. Parallel execution
//! partitions work per client and is bit-identical to the serial order.

use crate::config::{ExperimentConfig, ObjectiveKind};
use crate::csg::{
    cpr, dcpr, decode_wire, encode_wire, FeedbackState, QuantScheme,
};
use crate::nn::{EncoderModel, ParamVector};
use crate::probe::{linear_probe, ProbeReport};
use crate::scg::{
    local_train_epoch, pretrain_uni, sst_loss, LocalObjective, PerturbationRecord,
    PERTURBATION_FLOOR,
};
use crate::server::{
    cluster_models, cluster_weights, consensus_similarity, distill_step, model_similarity,
    weighted_sum, AggregationWeights,
};
use crate::ssl::{gen_federation_data, make_views, ssl_loss, Shard};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use std::io::Write as _;
use std::path::Path;

/// Stream tags, XORed into the run seed so each consumer of randomness gets
/// its own independent generator. Client `m` draws from `seed ^ m`. These
/// values are frozen: replaying a stream externally must keep reproducing
/// the same run, and the determinism tests rely on that.
pub const DATA_STREAM: u64 = 0x46e5_da7a_0000_0001;
pub const INIT_STREAM: u64 = 0x46e5_3017_0000_0002;
pub const UNI_STREAM: u64 = 0x46e5_0031_0000_0003;
pub const SERVER_STREAM: u64 = 0x46e5_5e4e_0000_0004;
pub const METRIC_STREAM: u64 = 0x46e5_be7c_0000_0005;
pub const PROBE_STREAM: u64 = 0x46e5_9406_0000_0006;
pub const QUAD_STREAM: u64 = 0x46e5_06ad_0000_0007;

/// Everything one client owns across rounds.
struct ClientSlot {
    id: usize,
    shard: Shard,
    rng: ChaCha8Rng,
    feedback: FeedbackState,
    quad_target: Option<ParamVector>,
}

struct ClientOutput {
    id: usize,
    shard_len: usize,
    recon: ParamVector,
    wire_bytes: usize,
    ssl_loss: f64,
    sst_loss: f64,
    delta_norm: f64,
    perturbations: Vec<PerturbationRecord>,
    feedback: Option<crate::csg::FeedbackUpdateInfo>,
}

/// Per-round metrics; `wall_ms` is measured here but serialized as zero so
/// run artifacts stay byte-reproducible.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub mean_ssl_loss: f64,
    pub mean_sst_loss: f64,
    pub distill_loss: f64,
    pub global_grad_norm_sq: f64,
    pub mean_client_drift: f64,
    pub uplink_bytes: u64,
    pub wall_ms: f64,
    pub participants: Vec<usize>,
}

/// One feedback accumulator observation.
#[derive(Debug, Clone, Copy)]
pub struct FeedbackTrace {
    pub client: usize,
    pub round: usize,
    pub residual_norm: f64,
    pub error_norm: f64,
    pub was_reset: bool,
}

/// Raw per-step observations backing the analytical checks.
#[derive(Debug, Clone, Default)]
pub struct TheoryLog {
    pub perturbations: Vec<PerturbationRecord>,
    pub feedback: Vec<FeedbackTrace>,
}

pub struct Federation {
    cfg: ExperimentConfig,
    dims: Vec<usize>,
    global: EncoderModel,
    uni: EncoderModel,
    clients: Vec<ClientSlot>,
    public: Shard,
    server_rng: ChaCha8Rng,
    metric_rng: ChaCha8Rng,
    round: usize,
    pool: Option<rayon::ThreadPool>,
    theory: TheoryLog,
}

impl Federation {
    pub fn new(cfg: ExperimentConfig) -> Result<Federation> {
        cfg.validate()?;
        let (shards, public) = gen_federation_data(&cfg.data_spec(), cfg.seed ^ DATA_STREAM)?;
        let dims = cfg.mode.model_dims(&cfg.model_dims);
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_STREAM);
        let global = EncoderModel::random_init(dims.clone(), &mut init_rng)?;

        let uni = if cfg.objective == ObjectiveKind::Ssl && cfg.scg.sst_weight > 0.0 {
            let mut uni_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ UNI_STREAM);
            pretrain_uni(
                dims.clone(),
                &public,
                cfg.uni_pretrain_steps,
                cfg.batch_size,
                cfg.scg.gamma,
                &mut uni_rng,
            )?
        } else {
            EncoderModel::zeros(dims.clone())?
        };

        let mut quad_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ QUAD_STREAM);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let param_dim = global.params().dim();
        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(id, shard)| {
                let quad_target = if cfg.objective == ObjectiveKind::Quadratic {
                    Some(ParamVector::new(
                        (0..param_dim).map(|_| normal.sample(&mut quad_rng)).collect(),
                    ))
                } else {
                    None
                };
                Ok(ClientSlot {
                    id,
                    shard,
                    rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ id as u64),
                    feedback: FeedbackState::new(param_dim, cfg.alpha, cfg.reset_period)?,
                    quad_target,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let pool = if cfg.threads >= 2 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.threads)
                    .build()
                    .map_err(|e| Error::Degenerate(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };

        Ok(Federation {
            server_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ SERVER_STREAM),
            metric_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ METRIC_STREAM),
            cfg,
            dims,
            global,
            uni,
            clients,
            public,
            round: 0,
            pool,
            theory: TheoryLog::default(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn global(&self) -> &EncoderModel {
        &self.global
    }

    pub fn universal(&self) -> &EncoderModel {
        &self.uni
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn theory(&self) -> &TheoryLog {
        &self.theory
    }

    fn pick_participants(&mut self) -> Vec<usize> {
        let m = self.clients.len();
        if self.cfg.participation >= 1.0 {
            return (0..m).collect();
        }
        let count = ((self.cfg.participation * m as f64).ceil() as usize).clamp(1, m);
        let mut picked = rand::seq::index::sample(&mut self.server_rng, m, count).into_vec();
        picked.sort_unstable();
        picked
    }

    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let started = std::time::Instant::now();
        let t = self.round;
        let participants = self.pick_participants();

        let broadcast = self.global.params().clone();
        let cfg = &self.cfg;
        let dims = &self.dims;
        let uni = &self.uni;
        let work = |slot: &mut ClientSlot| -> Result<ClientOutput> {
            let mut model = EncoderModel::new(dims.clone(), broadcast.clone())?;
            let objective = match &slot.quad_target {
                Some(target) => LocalObjective::Quadratic { target },
                None => LocalObjective::Ssl {
                    mode: cfg.mode,
                    batch_size: cfg.batch_size,
                    mask_ratio: cfg.mask_ratio,
                },
            };
            let mut ssl_sum = 0.0;
            let mut sst_sum = 0.0;
            let mut perturbations = Vec::new();
            for _ in 0..cfg.local_epochs {
                let stats = local_train_epoch(
                    &mut model,
                    &slot.shard,
                    &broadcast,
                    uni,
                    &cfg.scg,
                    &objective,
                    &mut slot.rng,
                )?;
                ssl_sum += stats.mean_ssl_loss;
                sst_sum += stats.mean_sst_loss;
                perturbations.extend(stats.perturbations);
            }
            let delta = model.params().sub(&broadcast)?;
            let sent = match cfg.scheme {
                QuantScheme::Stochastic => slot.feedback.compensate(&delta)?,
                QuantScheme::Uniform => delta.clone(),
            };
            let q = cpr(&sent, cfg.bits, cfg.scheme, &mut slot.rng)?;
            let wire = encode_wire(&q);
            let decoded = decode_wire(&wire)?;
            let recon = dcpr(&decoded);
            let feedback = match cfg.scheme {
                QuantScheme::Stochastic => Some(slot.feedback.update(&sent, &recon)?),
                QuantScheme::Uniform => None,
            };
            Ok(ClientOutput {
                id: slot.id,
                shard_len: slot.shard.len(),
                recon,
                wire_bytes: wire.len(),
                ssl_loss: ssl_sum / cfg.local_epochs as f64,
                sst_loss: sst_sum / cfg.local_epochs as f64,
                delta_norm: delta.norm(),
                perturbations,
                feedback,
            })
        };

        let mut selected: Vec<&mut ClientSlot> = self
            .clients
            .iter_mut()
            .filter(|slot| participants.binary_search(&slot.id).is_ok())
            .collect();
        let outputs: Vec<ClientOutput> = if self.cfg.threads == 1 {
            selected
                .iter_mut()
                .map(|slot| work(slot))
                .collect::<Result<_>>()?
        } else if let Some(pool) = &self.pool {
            pool.install(|| {
                selected
                    .par_iter_mut()
                    .map(|slot| work(slot))
                    .collect::<Result<_>>()
            })?
        } else {
            selected
                .par_iter_mut()
                .map(|slot| work(slot))
                .collect::<Result<_>>()?
        };

        for out in &outputs {
            self.theory.perturbations.extend(out.perturbations.iter().copied());
            if let Some(info) = out.feedback {
                self.theory.feedback.push(FeedbackTrace {
                    client: out.id,
                    round: t,
                    residual_norm: info.residual_norm,
                    error_norm: info.error_norm,
                    was_reset: info.was_reset,
                });
            }
        }

        let weights =
            AggregationWeights::from_shard_sizes(
                &outputs.iter().map(|o| o.shard_len).collect::<Vec<_>>(),
            )?;
        let recons: Vec<ParamVector> = outputs.iter().map(|o| o.recon.clone()).collect();
        let mut new_global = self.global.with_params(
            self.global.params().add(&weighted_sum(&recons, &weights)?)?,
        )?;

        let mut distill_loss = 0.0;
        if self.cfg.distill_steps > 0 {
            let client_models: Vec<ParamVector> = recons
                .iter()
                .map(|r| broadcast.add(r))
                .collect::<Result<_>>()?;
            let k = self.cfg.clusters.min(client_models.len());
            let clustering = cluster_models(&client_models, k, &mut self.server_rng)?;
            let sizes: Vec<usize> = outputs.iter().map(|o| o.shard_len).collect();
            let omega = cluster_weights(&clustering.assignments, k, &sizes)?;
            let batch: Vec<Vec<f64>> = self
                .public
                .samples()
                .iter()
                .take(self.cfg.distill_batch)
                .map(|s| s.pixels.clone())
                .collect();
            let similarities = clustering
                .centroids
                .iter()
                .map(|c| {
                    let rep = EncoderModel::new(self.dims.clone(), c.clone())?;
                    model_similarity(&rep, &batch)
                })
                .collect::<Result<Vec<_>>>()?;
            let consensus = consensus_similarity(&similarities, &omega)?;
            for step in 0..self.cfg.distill_steps {
                let loss = distill_step(
                    &mut new_global,
                    &batch,
                    &consensus,
                    self.cfg.distill_lr,
                )?;
                if step == 0 {
                    distill_loss = loss;
                }
            }
        }

        self.global = new_global;
        let global_grad_norm_sq = self.global_grad_norm_sq()?;

        let n = outputs.len() as f64;
        let record = RoundRecord {
            round: t,
            mean_ssl_loss: outputs.iter().map(|o| o.ssl_loss).sum::<f64>() / n,
            mean_sst_loss: outputs.iter().map(|o| o.sst_loss).sum::<f64>() / n,
            distill_loss,
            global_grad_norm_sq,
            mean_client_drift: outputs.iter().map(|o| o.delta_norm).sum::<f64>() / n,
            uplink_bytes: outputs.iter().map(|o| o.wire_bytes as u64).sum(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            participants,
        };
        self.round += 1;
        Ok(record)
    }

    /// Squared norm of the full-population objective gradient at the
    /// current global model. Exact for the quadratic surrogate; for the
    /// self-supervised objective it is a fresh-view full-batch estimate
    /// drawn from the metric stream.
    fn global_grad_norm_sq(&mut self) -> Result<f64> {
        let weights = AggregationWeights::from_shard_sizes(
            &self.clients.iter().map(|c| c.shard.len()).collect::<Vec<_>>(),
        )?;
        match self.cfg.objective {
            ObjectiveKind::Quadratic => {
                let mut acc = ParamVector::zeros(self.global.params().dim());
                for (slot, w) in self.clients.iter().zip(weights.values()) {
                    let target = slot.quad_target.as_ref().expect("quadratic target");
                    acc = acc.add(&self.global.params().sub(target)?.scale(*w))?;
                }
                acc.dot(&acc)
            }
            ObjectiveKind::Ssl => {
                let mut acc = ParamVector::zeros(self.global.params().dim());
                for (slot, w) in self.clients.iter().zip(weights.values()) {
                    let views = slot
                        .shard
                        .samples()
                        .iter()
                        .map(|s| {
                            make_views(s, self.cfg.mode, self.cfg.mask_ratio, &mut self.metric_rng)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let mut grad = ssl_loss(&self.global, &views, self.cfg.mode)?.grad;
                    if self.cfg.scg.sst_weight > 0.0 {
                        let sst = sst_loss(&self.global, &self.uni, slot.shard.samples())?;
                        grad = grad.add(&sst.grad.scale(self.cfg.scg.sst_weight))?;
                    }
                    acc = acc.add(&grad.scale(*w))?;
                }
                acc.dot(&acc)
            }
        }
    }
}

/// A completed run: metrics, the final and universal encoders, and the raw
/// observations for the analytical checks.
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub records: Vec<RoundRecord>,
    pub final_model: EncoderModel,
    pub uni: EncoderModel,
    pub theory: TheoryLog,
}

pub fn run_federation(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut fed = Federation::new(cfg.clone())?;
    let mut records = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        records.push(fed.run_round()?);
    }
    Ok(RunOutput {
        config: cfg.clone(),
        records,
        final_model: fed.global.clone(),
        uni: fed.uni.clone(),
        theory: fed.theory.clone(),
    })
}

/// Linear readout of a finished run's global encoder, on the run's probe
/// stream.
pub fn probe_run(out: &RunOutput) -> Result<ProbeReport> {
    linear_probe(
        &out.final_model,
        out.config.mode,
        out.config.domains,
        &out.config.probe,
        out.config.seed ^ PROBE_STREAM,
    )
}

/// Serializes round metrics. The header and float formatting are part of
/// the format contract; `wall_ms` is pinned to zero so identical runs byte
/// match.
pub fn metrics_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from(
        "round,mean_ssl_loss,mean_sst_loss,distill_loss,global_grad_norm_sq,mean_client_drift,uplink_bytes,wall_ms\n",
    );
    for r in records {
        out.push_str(&format!(
            "{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{},0\n",
            r.round,
            r.mean_ssl_loss,
            r.mean_sst_loss,
            r.distill_loss,
            r.global_grad_norm_sq,
            r.mean_client_drift,
            r.uplink_bytes
        ));
    }
    out
}

pub fn write_metrics_csv(records: &[RoundRecord], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(metrics_csv(records).as_bytes())?;
    Ok(())
}

/// Result of replaying the perturbation-norm identity over a log.
#[derive(Debug, Clone, Copy)]
pub struct PerturbationCheck {
    pub checked: usize,
    pub active: usize,
    pub max_deviation: f64,
}

/// Verifies that every recorded perturbation has norm exactly `lambda`
/// whenever the client had drifted, and exactly zero otherwise.
pub fn check_perturbation_norms(
    log: &TheoryLog,
    lambda: f64,
    tol: f64,
) -> Result<PerturbationCheck> {
    let mut max_dev: f64 = 0.0;
    let mut active = 0;
    for rec in &log.perturbations {
        if rec.drift > PERTURBATION_FLOOR {
            active += 1;
            max_dev = max_dev.max((rec.eps_norm - lambda).abs());
        } else if rec.eps_norm != 0.0 {
            return Err(Error::Degenerate(format!(
                "non-zero perturbation {} at drift {}",
                rec.eps_norm, rec.drift
            )));
        }
    }
    if max_dev > tol {
        return Err(Error::Degenerate(format!(
            "perturbation norm deviated from lambda by {max_dev}"
        )));
    }
    Ok(PerturbationCheck {
        checked: log.perturbations.len(),
        active,
        max_deviation: max_dev,
    })
}

/// Result of replaying the error-accumulator bound over a log.
#[derive(Debug, Clone, Copy)]
pub struct ErrorBoundCheck {
    pub checked: usize,
    pub max_violation: f64,
}

/// Verifies the geometric bound on the feedback accumulator: with the
/// accumulator starting at zero, after each update its norm may not exceed
/// the decayed running combination of residual norms; both sides restart
/// at every reset.
pub fn check_error_bound(log: &TheoryLog, alpha: f64, tol: f64) -> Result<ErrorBoundCheck> {
    use std::collections::BTreeMap;
    let mut per_client: BTreeMap<usize, Vec<&FeedbackTrace>> = BTreeMap::new();
    for trace in &log.feedback {
        per_client.entry(trace.client).or_default().push(trace);
    }
    let mut checked = 0;
    let mut max_violation: f64 = 0.0;
    for traces in per_client.values_mut() {
        traces.sort_by_key(|t| t.round);
        let mut rhs = 0.0;
        for t in traces.iter() {
            rhs = alpha * rhs + (1.0 - alpha) * t.residual_norm;
            let effective = if t.was_reset { 0.0 } else { t.error_norm };
            max_violation = max_violation.max(effective - rhs);
            checked += 1;
            if t.was_reset {
                rhs = 0.0;
            }
        }
    }
    if max_violation > tol {
        return Err(Error::Degenerate(format!(
            "error accumulator exceeded its bound by {max_violation}"
        )));
    }
    Ok(ErrorBoundCheck {
        checked,
        max_violation,
    })
}

/// Joint report of both per-run analytical checks.
#[derive(Debug, Clone, Copy)]
pub struct InvariantReport {
    pub perturbation: PerturbationCheck,
    pub error_bound: ErrorBoundCheck,
}

/// Runs the full protocol once and replays both analytical checks over its
/// logs.
pub fn theory_check_invariants(cfg: &ExperimentConfig, tol: f64) -> Result<InvariantReport> {
    let out = run_federation(cfg)?;
    Ok(InvariantReport {
        perturbation: check_perturbation_norms(&out.theory, cfg.scg.lambda, tol)?,
        error_bound: check_error_bound(&out.theory, cfg.alpha, tol)?,
    })
}

/// One horizon of the convergence sweep.
#[derive(Debug, Clone, Copy)]
pub struct ConvergencePoint {
    pub rounds: usize,
    pub gamma: f64,
    /// Round-averaged squared gradient norm, averaged over seeds.
    pub mean_grad_sq: f64,
}

const CONVERGENCE_REFERENCE_ROUNDS: f64 = 100.0;
const CONVERGENCE_MAX_PARAMS: usize = 500;

/// Full result of a horizon sweep: seed-averaged points plus the raw
/// per-seed values (`per_seed[seed][horizon]`).
#[derive(Debug, Clone)]
pub struct ConvergenceSweep {
    pub points: Vec<ConvergencePoint>,
    pub per_seed: Vec<Vec<f64>>,
}

impl ConvergenceSweep {
    /// How many seeds have a non-increasing value across the horizons.
    pub fn monotone_seeds(&self) -> usize {
        self.per_seed
            .iter()
            .filter(|row| row.windows(2).all(|w| w[1] <= w[0]))
            .count()
    }
}

/// Sweeps training horizons with the learning rate scaled like
/// `1/sqrt(rounds)` and reports the round-averaged squared gradient norm
/// per horizon, per seed and seed-averaged. Restricted to small models so
/// the sweep stays desk-scale.
pub fn theory_check_convergence(
    base: &ExperimentConfig,
    horizons: &[usize],
    seeds: usize,
) -> Result<ConvergenceSweep> {
    base.validate()?;
    if horizons.is_empty() || seeds == 0 {
        return Err(Error::param("horizons/seeds", "must be non-empty"));
    }
    let dims = base.mode.model_dims(&base.model_dims);
    let params = crate::nn::param_count(&dims);
    if params > CONVERGENCE_MAX_PARAMS {
        return Err(Error::Degenerate(format!(
            "convergence sweep expects at most {CONVERGENCE_MAX_PARAMS} parameters, model has {params}"
        )));
    }
    let mut points = Vec::with_capacity(horizons.len());
    let mut per_seed = vec![Vec::with_capacity(horizons.len()); seeds];
    for &rounds in horizons {
        if rounds == 0 {
            return Err(Error::param("horizons", "must be >= 1"));
        }
        let gamma = base.scg.gamma * (CONVERGENCE_REFERENCE_ROUNDS / rounds as f64).sqrt();
        let mut total = 0.0;
        for (i, row) in per_seed.iter_mut().enumerate() {
            let mut cfg = base.clone();
            cfg.rounds = rounds;
            cfg.seed = base.seed.wrapping_add(i as u64);
            cfg.scg.gamma = gamma;
            let out = run_federation(&cfg)?;
            let run_mean = out
                .records
                .iter()
                .map(|r| r.global_grad_norm_sq)
                .sum::<f64>()
                / out.records.len() as f64;
            row.push(run_mean);
            total += run_mean;
        }
        points.push(ConvergencePoint {
            rounds,
            gamma,
            mean_grad_sq: total / seeds as f64,
        });
    }
    Ok(ConvergenceSweep { points, per_seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csg::wire_len;
    use crate::nn::{param_count, sgd_step};
    use crate::scg::ScgConfig;
    use crate::ssl::SslMode;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            rounds: 3,
            clients: 4,
            batch_size: 4,
            samples_per_client: vec![8],
            public_samples: 8,
            domains: 3,
            model_dims: vec![16, 8, 4],
            uni_pretrain_steps: 5,
            distill_steps: 2,
            distill_batch: 8,
            clusters: 2,
            probe: crate::probe::ProbeConfig {
                train_samples: 24,
                test_samples: 24,
                steps: 20,
                lr: 0.5,
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn identical_runs_match_bit_for_bit() {
        let cfg = small_cfg();
        let a = run_federation(&cfg).unwrap();
        let b = run_federation(&cfg).unwrap();
        assert_eq!(a.final_model.params(), b.final_model.params());
        assert_eq!(metrics_csv(&a.records), metrics_csv(&b.records));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let mut serial = small_cfg();
        serial.threads = 1;
        let mut parallel = small_cfg();
        parallel.threads = 3;
        let a = run_federation(&serial).unwrap();
        let b = run_federation(&parallel).unwrap();
        assert_eq!(a.final_model.params(), b.final_model.params());
        assert_eq!(metrics_csv(&a.records), metrics_csv(&b.records));
    }

    /// With guidance, stabilization, compression, and distillation all
    /// disabled, a round must equal plain weighted-average federated SGD
    /// driven by the same per-client streams.
    #[test]
    fn all_disabled_reduces_to_plain_federated_averaging() {
        let mut cfg = small_cfg();
        cfg.scg = ScgConfig {
            beta: 0.0,
            lambda: 0.0,
            sst_weight: 0.0,
            ..ScgConfig::default()
        };
        cfg.distill_steps = 0;
        cfg.bits = 32;
        cfg.rounds = 3;
        let out = run_federation(&cfg).unwrap();

        // Reference loop.
        let (shards, _public) =
            gen_federation_data(&cfg.data_spec(), cfg.seed ^ DATA_STREAM).unwrap();
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_STREAM);
        let mut global = EncoderModel::random_init(cfg.model_dims.clone(), &mut init_rng)
            .unwrap()
            .into_params();
        let uni = EncoderModel::zeros(cfg.model_dims.clone()).unwrap();
        let mut rngs: Vec<ChaCha8Rng> = (0..cfg.clients)
            .map(|id| ChaCha8Rng::seed_from_u64(cfg.seed ^ id as u64))
            .collect();
        let weights =
            AggregationWeights::from_shard_sizes(&shards.iter().map(|s| s.len()).collect::<Vec<_>>())
                .unwrap();
        for _ in 0..cfg.rounds {
            let mut deltas = Vec::new();
            for (shard, rng) in shards.iter().zip(&mut rngs) {
                let mut model =
                    EncoderModel::new(cfg.model_dims.clone(), global.clone()).unwrap();
                local_train_epoch(
                    &mut model,
                    shard,
                    &global,
                    &uni,
                    &cfg.scg,
                    &LocalObjective::Ssl {
                        mode: cfg.mode,
                        batch_size: cfg.batch_size,
                        mask_ratio: cfg.mask_ratio,
                    },
                    rng,
                )
                .unwrap();
                deltas.push(model.params().sub(&global).unwrap());
            }
            global = global.add(&weighted_sum(&deltas, &weights).unwrap()).unwrap();
        }
        assert_eq!(out.final_model.params(), &global);
    }

    #[test]
    fn single_client_full_width_is_identity_aggregation() {
        let mut cfg = small_cfg();
        cfg.clients = 1;
        cfg.samples_per_client = vec![8];
        cfg.distill_steps = 0;
        cfg.bits = 32;
        cfg.rounds = 1;
        let mut fed = Federation::new(cfg.clone()).unwrap();
        let start = fed.global().params().clone();

        // Replicate the single client's local run on the same stream.
        let mut model = EncoderModel::new(fed.dims.clone(), start.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        local_train_epoch(
            &mut model,
            &fed.clients[0].shard.clone(),
            &start,
            &fed.uni.clone(),
            &cfg.scg,
            &LocalObjective::Ssl {
                mode: cfg.mode,
                batch_size: cfg.batch_size,
                mask_ratio: cfg.mask_ratio,
            },
            &mut rng,
        )
        .unwrap();

        fed.run_round().unwrap();
        assert_eq!(fed.global().params(), model.params());
    }

    #[test]
    fn partial_participation_draws_sorted_distinct_subsets() {
        let mut cfg = small_cfg();
        cfg.clients = 10;
        cfg.participation = 0.3;
        cfg.rounds = 4;
        cfg.samples_per_client = vec![6];
        let out = run_federation(&cfg).unwrap();
        let mut saw_difference = false;
        for r in &out.records {
            assert_eq!(r.participants.len(), 3);
            assert!(r.participants.windows(2).all(|w| w[0] < w[1]));
            if r.participants != out.records[0].participants {
                saw_difference = true;
            }
        }
        assert!(saw_difference, "participation never varied across rounds");
    }

    #[test]
    fn uplink_bytes_follow_the_wire_formula() {
        for bits in [1u8, 4, 32] {
            let mut cfg = small_cfg();
            cfg.bits = bits;
            cfg.rounds = 1;
            let dims = cfg.mode.model_dims(&cfg.model_dims);
            let out = run_federation(&cfg).unwrap();
            let expected = (cfg.clients * wire_len(bits, param_count(&dims))) as u64;
            assert_eq!(out.records[0].uplink_bytes, expected);
        }
    }

    #[test]
    fn downstream_features_are_isolated_from_server_extras() {
        // Client training in round 0 must be unaffected by distillation
        // (which happens after the uplink) and by the bit width of the
        // *previous* run's compression.
        let mut with_distill = small_cfg();
        with_distill.rounds = 1;
        let mut without = with_distill.clone();
        without.distill_steps = 0;
        let a = run_federation(&with_distill).unwrap();
        let b = run_federation(&without).unwrap();
        assert_eq!(a.records[0].mean_ssl_loss, b.records[0].mean_ssl_loss);
        assert_ne!(
            a.final_model.params(),
            b.final_model.params(),
            "distillation should move the aggregate"
        );
    }

    #[test]
    fn quadratic_runs_descend() {
        let mut cfg = small_cfg();
        cfg.objective = ObjectiveKind::Quadratic;
        cfg.model_dims = vec![4, 3];
        cfg.distill_steps = 0;
        cfg.uni_pretrain_steps = 0;
        cfg.scg = ScgConfig {
            gamma: 0.3,
            ..ScgConfig::default()
        };
        cfg.rounds = 30;
        let out = run_federation(&cfg).unwrap();
        let first = out.records.first().unwrap().global_grad_norm_sq;
        let last = out.records.last().unwrap().global_grad_norm_sq;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn csv_format_is_pinned() {
        let mut cfg = small_cfg();
        cfg.rounds = 2;
        let out = run_federation(&cfg).unwrap();
        let csv = metrics_csv(&out.records);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "round,mean_ssl_loss,mean_sst_loss,distill_loss,global_grad_norm_sq,mean_client_drift,uplink_bytes,wall_ms"
        );
        for (i, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 8);
            assert_eq!(cols[0], i.to_string());
            assert_eq!(cols[7], "0");
            for value in &cols[1..6] {
                assert!(value.contains('e'), "{value} not in scientific notation");
            }
        }
    }

    #[test]
    fn analytic_checks_hold_on_a_compressed_run() {
        let mut cfg = small_cfg();
        cfg.bits = 4;
        cfg.rounds = 12;
        cfg.reset_period = 5;
        let report = theory_check_invariants(&cfg, 1e-9).unwrap();
        assert!(report.perturbation.active > 0);
        assert_eq!(
            report.error_bound.checked,
            cfg.rounds * cfg.clients
        );
    }

    #[test]
    fn convergence_sweep_scales_gamma_and_refuses_big_models() {
        let mut cfg = small_cfg();
        cfg.objective = ObjectiveKind::Quadratic;
        cfg.model_dims = vec![4, 3];
        cfg.distill_steps = 0;
        cfg.scg.gamma = 0.2;
        let sweep = theory_check_convergence(&cfg, &[4, 16], 2).unwrap();
        assert_eq!(sweep.points.len(), 2);
        assert!((sweep.points[0].gamma - 0.2 * (100.0f64 / 4.0).sqrt()).abs() < 1e-12);
        assert!((sweep.points[1].gamma - 0.2 * (100.0f64 / 16.0).sqrt()).abs() < 1e-12);
        assert!(sweep.points.iter().all(|p| p.mean_grad_sq.is_finite()));
        assert_eq!(sweep.per_seed.len(), 2);
        assert!(sweep.per_seed.iter().all(|row| row.len() == 2));
        assert!(sweep.monotone_seeds() <= 2);

        let mut big = small_cfg();
        big.objective = ObjectiveKind::Quadratic;
        big.model_dims = vec![64, 32, 16];
        assert!(theory_check_convergence(&big, &[4], 1).is_err());
    }

    #[test]
    fn probe_runs_on_finished_output() {
        let mut cfg = small_cfg();
        cfg.rounds = 1;
        let out = run_federation(&cfg).unwrap();
        let report = probe_run(&out).unwrap();
        assert!(report.test_accuracy >= 0.0 && report.test_accuracy <= 1.0);
    }
}
