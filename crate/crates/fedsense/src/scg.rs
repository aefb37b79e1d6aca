//! Server-to-Clients Guidance: adversarial discrepancy perturbation plus
//! self-stabilization.
//!
//! Before each mini-batch gradient, a client nudges its parameters along the
//! direction in which its discrepancy from the broadcast global model grows
//! fastest, capped at norm `lambda`. Gradients of the combined objective
//! (self-supervised loss plus a cosine alignment term against a frozen
//! universal encoder) are evaluated at the perturbed point and applied to
//! the unperturbed parameters.

use crate::nn::{loss_and_grad, sgd_step, EncoderModel, GradResult, ParamVector};
use crate::ssl::{make_views, ssl_loss, stable_cosine, Sample, Shard, SslMode};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;

/// Smallest discrepancy-gradient norm that still defines a direction.
pub const PERTURBATION_FLOOR: f64 = 1e-12;

/// Client-side guidance knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScgConfig {
    /// Discrepancy strength (Lipschitz bound of the discrepancy gradient).
    pub beta: f64,
    /// Perturbation radius actually applied.
    pub lambda: f64,
    /// Admissible perturbation budget; `lambda <= rho`.
    pub rho: f64,
    /// Local SGD learning rate.
    pub gamma: f64,
    /// Weight of the self-stabilization term.
    pub sst_weight: f64,
}

impl Default for ScgConfig {
    fn default() -> Self {
        ScgConfig {
            beta: 0.1,
            lambda: 0.05,
            rho: 0.05,
            gamma: 0.05,
            sst_weight: 0.1,
        }
    }
}

impl ScgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::param("scg.beta", "must be >= 0"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::param("scg.lambda", "must be >= 0"));
        }
        if !(self.rho > 0.0) {
            return Err(Error::param("scg.rho", "must be > 0"));
        }
        if self.lambda > self.rho {
            return Err(Error::param(
                "scg.lambda",
                "must not exceed the perturbation budget scg.rho",
            ));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::param("scg.gamma", "must be >= 0"));
        }
        if !(self.sst_weight >= 0.0) {
            return Err(Error::param("scg.sst_weight", "must be >= 0"));
        }
        Ok(())
    }
}

/// Gradient of the discrepancy term: `beta * (local - global)`.
pub fn discrepancy_grad(
    local: &ParamVector,
    global: &ParamVector,
    beta: f64,
) -> Result<ParamVector> {
    if !(beta >= 0.0) {
        return Err(Error::param("beta", "must be >= 0"));
    }
    Ok(local.sub(global)?.scale(beta))
}

/// First-order optimal perturbation: `lambda` times the unit discrepancy
/// direction, or zero when the discrepancy gradient norm falls below
/// [`PERTURBATION_FLOOR`].
pub fn optimal_perturbation(
    local: &ParamVector,
    global: &ParamVector,
    cfg: &ScgConfig,
) -> Result<ParamVector> {
    let g = discrepancy_grad(local, global, cfg.beta)?;
    let norm = g.norm();
    if norm < PERTURBATION_FLOOR {
        return Ok(ParamVector::zeros(local.dim()));
    }
    Ok(g.scale(cfg.lambda / norm))
}

/// Self-stabilization loss: mean negative stabilized cosine between the
/// model's features and the frozen universal encoder's features on the raw
/// batch samples. Gradients flow through the model only.
pub fn sst_loss(model: &EncoderModel, uni: &EncoderModel, batch: &[Sample]) -> Result<GradResult> {
    if batch.is_empty() {
        return Err(Error::param("batch", "must be non-empty"));
    }
    if uni.input_dim() != model.input_dim() || uni.feature_dim() != model.feature_dim() {
        return Err(Error::DimensionMismatch {
            context: "sst_loss universal encoder",
            expected: model.feature_dim(),
            got: uni.feature_dim(),
        });
    }
    let anchors: Vec<Vec<f64>> = batch
        .iter()
        .map(|s| uni.forward(&s.pixels))
        .collect::<Result<_>>()?;
    let inputs: Vec<Vec<f64>> = batch.iter().map(|s| s.pixels.clone()).collect();
    let b = batch.len() as f64;
    loss_and_grad(model, &inputs, move |feats| {
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(feats.len());
        for (z, u) in feats.iter().zip(&anchors) {
            loss += -stable_cosine(z, u) / b;
            let g = crate::ssl::cosine_grad_wrt_a(z, u);
            grads.push(g.iter().map(|v| -v / b).collect());
        }
        Ok((loss, grads))
    })
}

/// What a client minimizes locally.
#[derive(Debug, Clone, Copy)]
pub enum LocalObjective<'a> {
    /// The real protocol: self-supervised loss plus weighted
    /// self-stabilization.
    Ssl {
        mode: SslMode,
        batch_size: usize,
        mask_ratio: f64,
    },
    /// Convergence-harness surrogate: `0.5 * ||theta - target||^2` per
    /// client, one full-batch step per epoch. Ignores the universal encoder
    /// and the stabilization weight.
    Quadratic { target: &'a ParamVector },
}

/// Norm bookkeeping for one computed perturbation.
#[derive(Debug, Clone, Copy)]
pub struct PerturbationRecord {
    /// `||theta_m - Theta||` at the moment the perturbation was formed.
    pub drift: f64,
    pub eps_norm: f64,
}

/// Per-epoch training outcome.
#[derive(Debug, Clone, Default)]
pub struct EpochStats {
    pub mean_ssl_loss: f64,
    pub mean_sst_loss: f64,
    pub batches: usize,
    pub perturbations: Vec<PerturbationRecord>,
}

/// Runs one local epoch: shuffled mini-batches without replacement, each
/// taking a perturb-evaluate-step cycle. Consumes, per batch and in order,
/// the shuffle draws then the view draws sample by sample.
pub fn local_train_epoch<R: Rng>(
    model: &mut EncoderModel,
    shard: &Shard,
    broadcast: &ParamVector,
    uni: &EncoderModel,
    cfg: &ScgConfig,
    objective: &LocalObjective,
    rng: &mut R,
) -> Result<EpochStats> {
    cfg.validate()?;
    let mut stats = EpochStats::default();
    match objective {
        LocalObjective::Quadratic { target } => {
            let (loss, record) = quadratic_step(model, broadcast, target, cfg)?;
            stats.mean_ssl_loss = loss;
            stats.batches = 1;
            stats.perturbations.push(record);
        }
        LocalObjective::Ssl {
            mode,
            batch_size,
            mask_ratio,
        } => {
            if *batch_size == 0 {
                return Err(Error::param("batch_size", "must be >= 1"));
            }
            let mut order: Vec<usize> = (0..shard.len()).collect();
            order.shuffle(rng);
            let mut ssl_sum = 0.0;
            let mut sst_sum = 0.0;
            for chunk in order.chunks(*batch_size) {
                let samples: Vec<&Sample> = chunk.iter().map(|&i| &shard.samples()[i]).collect();
                let views = samples
                    .iter()
                    .map(|s| make_views(s, *mode, *mask_ratio, rng))
                    .collect::<Result<Vec<_>>>()?;

                let drift = model.params().sub(broadcast)?.norm();
                let eps = optimal_perturbation(model.params(), broadcast, cfg)?;
                stats.perturbations.push(PerturbationRecord {
                    drift,
                    eps_norm: eps.norm(),
                });
                let perturbed = model.with_params(model.params().add(&eps)?)?;

                let ssl_part = ssl_loss(&perturbed, &views, *mode)?;
                let mut total_grad = ssl_part.grad;
                let mut sst_value = 0.0;
                if cfg.sst_weight > 0.0 {
                    let owned: Vec<Sample> = samples.iter().map(|s| (*s).clone()).collect();
                    let sst_part = sst_loss(&perturbed, uni, &owned)?;
                    sst_value = sst_part.loss;
                    total_grad = total_grad.add(&sst_part.grad.scale(cfg.sst_weight))?;
                }
                ssl_sum += ssl_part.loss;
                sst_sum += sst_value;
                stats.batches += 1;

                let next = sgd_step(model.params(), &total_grad, cfg.gamma)?;
                *model = model.with_params(next)?;
            }
            if stats.batches > 0 {
                stats.mean_ssl_loss = ssl_sum / stats.batches as f64;
                stats.mean_sst_loss = sst_sum / stats.batches as f64;
            }
        }
    }
    Ok(stats)
}

fn quadratic_step(
    model: &mut EncoderModel,
    broadcast: &ParamVector,
    target: &ParamVector,
    cfg: &ScgConfig,
) -> Result<(f64, PerturbationRecord)> {
    let drift = model.params().sub(broadcast)?.norm();
    let eps = optimal_perturbation(model.params(), broadcast, cfg)?;
    let record = PerturbationRecord {
        drift,
        eps_norm: eps.norm(),
    };
    let perturbed = model.params().add(&eps)?;
    let residual = perturbed.sub(target)?;
    let loss = 0.5 * residual.dot(&residual)?;
    let next = sgd_step(model.params(), &residual, cfg.gamma)?;
    *model = model.with_params(next)?;
    Ok((loss, record))
}

/// Trains the frozen universal encoder: a fresh random model fitted with
/// `steps` contrastive mini-batch steps on the public shard, then returned
/// for broadcast. The caller freezes it by never updating it again.
pub fn pretrain_uni<R: Rng>(
    layer_dims: Vec<usize>,
    public: &Shard,
    steps: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut R,
) -> Result<EncoderModel> {
    if batch_size == 0 {
        return Err(Error::param("batch_size", "must be >= 1"));
    }
    let mut model = EncoderModel::random_init(layer_dims, rng)?;
    let mut done = 0;
    while done < steps {
        let mut order: Vec<usize> = (0..public.len()).collect();
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            if done >= steps {
                break;
            }
            let views = chunk
                .iter()
                .map(|&i| make_views(&public.samples()[i], SslMode::Contrastive, 0.5, rng))
                .collect::<Result<Vec<_>>>()?;
            let res = ssl_loss(&model, &views, SslMode::Contrastive)?;
            let next = sgd_step(model.params(), &res.grad, lr)?;
            model = model.with_params(next)?;
            done += 1;
        }
    }
    Ok(model)
}
