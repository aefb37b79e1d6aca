//! Synthetic sensing data and self-supervised objectives.
//!
//! Samples are square patches of a procedural texture: each latent domain is
//! a sinusoidal grating with its own spatial frequency, orientation, and
//! noise level. Clients draw their domain mixture from a Dirichlet
//! distribution, so one `heterogeneity` knob spans IID to single-domain
//! shards. Two objectives are supported: contrastive view alignment
//! (stabilized cosine) and masked reconstruction.

use crate::nn::{loss_and_grad, EncoderModel, GradResult};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution, Normal};

/// Denominator stabilizer used by every cosine in the crate.
pub const NORM_EPS: f64 = 1e-12;

/// Contrastive augmentation constants: additive noise sigma, pixel dropout
/// rate, brightness shift half-range.
pub const NOISE_SIGMA: f64 = 0.05;
pub const DROPOUT_RATE: f64 = 0.1;
pub const BRIGHTNESS_RANGE: f64 = 0.1;

/// One sensing patch with its latent domain label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub pixels: Vec<f64>,
    pub domain_id: usize,
}

/// Two views of one sample. `mask` is present in masked mode only and marks
/// the pixels that were zeroed in `view_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_a: Vec<f64>,
    pub view_b: Vec<f64>,
    pub mask: Option<Vec<bool>>,
}

/// Non-empty collection of samples owned by one party.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    samples: Vec<Sample>,
}

impl Shard {
    pub fn new(samples: Vec<Sample>) -> Result<Shard> {
        if samples.is_empty() {
            return Err(Error::param("samples", "shard must be non-empty"));
        }
        Ok(Shard { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Self-supervised objective family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SslMode {
    Contrastive,
    Masked,
}

impl SslMode {
    /// Full model layer widths for a given encoder stack. Masked mode pairs
    /// the encoder with a linear reconstruction head as its final layer.
    pub fn model_dims(&self, encoder_dims: &[usize]) -> Vec<usize> {
        match self {
            SslMode::Contrastive => encoder_dims.to_vec(),
            SslMode::Masked => {
                let mut dims = encoder_dims.to_vec();
                dims.push(encoder_dims[0]);
                dims
            }
        }
    }

    /// Number of layers that make up the feature extractor (the
    /// reconstruction head is not part of it).
    pub fn feature_layers(&self, model: &EncoderModel) -> usize {
        match self {
            SslMode::Contrastive => model.num_layers(),
            SslMode::Masked => model.num_layers().saturating_sub(1).max(1),
        }
    }
}

/// Shape of the synthetic federation dataset.
#[derive(Debug, Clone)]
pub struct DataSpec {
    pub num_domains: usize,
    pub patch_dim: usize,
    pub heterogeneity: f64,
    pub samples_per_client: Vec<usize>,
    pub public_samples: usize,
}

impl DataSpec {
    fn validate(&self) -> Result<usize> {
        if self.num_domains == 0 {
            return Err(Error::param("num_domains", "must be >= 1"));
        }
        if !(self.heterogeneity > 0.0) {
            return Err(Error::param("heterogeneity", "must be > 0"));
        }
        let side = (self.patch_dim as f64).sqrt().round() as usize;
        if side == 0 || side * side != self.patch_dim {
            return Err(Error::param("patch_dim", "must be a positive perfect square"));
        }
        if self.samples_per_client.is_empty() || self.samples_per_client.iter().any(|&n| n == 0) {
            return Err(Error::param(
                "samples_per_client",
                "need at least one client, all shard sizes >= 1",
            ));
        }
        if self.public_samples == 0 {
            return Err(Error::param("public_samples", "must be >= 1"));
        }
        Ok(side)
    }
}

/// Grating parameters of one latent domain.
fn domain_texture(k: usize, num_domains: usize, side: usize) -> (f64, f64, f64) {
    let t = if num_domains > 1 {
        k as f64 / (num_domains - 1) as f64
    } else {
        0.5
    };
    let freq = 0.75 + (0.45 * side as f64 - 0.75) * t;
    let orientation = std::f64::consts::PI * k as f64 / num_domains as f64;
    let noise = 0.02 + 0.02 * (k % 3) as f64;
    (freq, orientation, noise)
}

/// Draws one patch of domain `k`: a phase-randomized grating plus pixel
/// noise, clamped to `[0, 1]`. Consumes one uniform (phase) then `side^2`
/// normal draws.
fn gen_sample<R: Rng>(k: usize, num_domains: usize, side: usize, rng: &mut R) -> Sample {
    let (freq, orientation, noise) = domain_texture(k, num_domains, side);
    let phase = rng.gen::<f64>() * std::f64::consts::TAU;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let (cos_t, sin_t) = (orientation.cos(), orientation.sin());
    let mut pixels = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let u = (c as f64 * cos_t + r as f64 * sin_t) / side as f64;
            let v = 0.5
                + 0.38 * (std::f64::consts::TAU * freq * u + phase).sin()
                + noise * normal.sample(rng);
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    Sample { pixels, domain_id: k }
}

fn sample_dirichlet<R: Rng>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let dir = Dirichlet::new(&vec![alpha; k]).expect("valid dirichlet parameters");
    dir.sample(rng)
}

fn categorical<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let u = rng.gen::<f64>();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Generates every client shard plus the server's public shard. Client
/// domain mixtures are Dirichlet(`heterogeneity`); the public shard is
/// uniform over domains. Fully deterministic in `seed`.
pub fn gen_federation_data(spec: &DataSpec, seed: u64) -> Result<(Vec<Shard>, Shard)> {
    let side = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shards = Vec::with_capacity(spec.samples_per_client.len());
    for &count in &spec.samples_per_client {
        let weights = sample_dirichlet(spec.heterogeneity, spec.num_domains, &mut rng);
        let samples = (0..count)
            .map(|_| {
                let k = categorical(&weights, &mut rng);
                gen_sample(k, spec.num_domains, side, &mut rng)
            })
            .collect();
        shards.push(Shard::new(samples)?);
    }
    let public = Shard::new(
        (0..spec.public_samples)
            .map(|_| {
                let k = rng.gen_range(0..spec.num_domains);
                gen_sample(k, spec.num_domains, side, &mut rng)
            })
            .collect(),
    )?;
    Ok((shards, public))
}

/// Generates a balanced labeled set for downstream evaluation: domains are
/// assigned round-robin, patches drawn from the domain generator.
/// Deterministic in `seed`, independent of federation data.
pub fn gen_labeled_shard(
    num_domains: usize,
    patch_dim: usize,
    count: usize,
    seed: u64,
) -> Result<Shard> {
    if num_domains == 0 {
        return Err(Error::param("num_domains", "must be >= 1"));
    }
    let side = (patch_dim as f64).sqrt().round() as usize;
    if side == 0 || side * side != patch_dim {
        return Err(Error::param("patch_dim", "must be a positive perfect square"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Shard::new(
        (0..count)
            .map(|i| gen_sample(i % num_domains, num_domains, side, &mut rng))
            .collect(),
    )
}

/// Builds the two training views of a sample.
///
/// Contrastive mode: per view, in order, additive Gaussian noise
/// (`NOISE_SIGMA`), pixel dropout (`DROPOUT_RATE`), one global brightness
/// shift (`±BRIGHTNESS_RANGE`), then clamp to `[0, 1]`; view `a` is drawn
/// fully before view `b`. Masked mode: view `a` is the untouched sample,
/// view `b` zeroes a Bernoulli(`mask_ratio`) mask (re-pointed to one uniform
/// index if it came up empty).
pub fn make_views<R: Rng>(
    sample: &Sample,
    mode: SslMode,
    mask_ratio: f64,
    rng: &mut R,
) -> Result<ViewPair> {
    match mode {
        SslMode::Contrastive => {
            let view_a = augment(&sample.pixels, rng);
            let view_b = augment(&sample.pixels, rng);
            Ok(ViewPair {
                view_a,
                view_b,
                mask: None,
            })
        }
        SslMode::Masked => {
            if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
                return Err(Error::param("mask_ratio", "must lie strictly inside (0, 1)"));
            }
            let mut mask: Vec<bool> = (0..sample.pixels.len())
                .map(|_| rng.gen::<f64>() < mask_ratio)
                .collect();
            if mask.iter().all(|m| !m) {
                let forced = rng.gen_range(0..mask.len());
                mask[forced] = true;
            }
            let view_b = sample
                .pixels
                .iter()
                .zip(&mask)
                .map(|(p, m)| if *m { 0.0 } else { *p })
                .collect();
            Ok(ViewPair {
                view_a: sample.pixels.clone(),
                view_b,
                mask: Some(mask),
            })
        }
    }
}

fn augment<R: Rng>(pixels: &[f64], rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, NOISE_SIGMA).unwrap();
    let mut out: Vec<f64> = pixels.iter().map(|p| p + normal.sample(rng)).collect();
    for v in out.iter_mut() {
        if rng.gen::<f64>() < DROPOUT_RATE {
            *v = 0.0;
        }
    }
    let shift = rng.gen_range(-BRIGHTNESS_RANGE..BRIGHTNESS_RANGE);
    for v in out.iter_mut() {
        *v = (*v + shift).clamp(0.0, 1.0);
    }
    out
}

/// Stabilized cosine of two feature vectors.
pub fn stable_cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = l2(a) + NORM_EPS;
    let nb = l2(b) + NORM_EPS;
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `d(cosine)/da` for the stabilized cosine, holding `b` fixed.
pub(crate) fn cosine_grad_wrt_a(a: &[f64], b: &[f64]) -> Vec<f64> {
    let raw_na = l2(a);
    let na = raw_na + NORM_EPS;
    let nb = l2(b) + NORM_EPS;
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let denom = na * nb;
    a.iter()
        .zip(b)
        .map(|(ai, bi)| {
            let dna = if raw_na > 0.0 { ai / raw_na } else { 0.0 };
            bi / denom - dot * dna / (na * denom)
        })
        .collect()
}

/// Self-supervised loss and gradient on a batch of view pairs.
///
/// Contrastive: mean of `1 - cos(f(view_a), f(view_b))`, gradients flowing
/// through both views. Masked: mean squared reconstruction error on masked
/// entries only, the model output read as the reconstruction of `view_b`
/// against the `view_a` target.
pub fn ssl_loss(model: &EncoderModel, batch: &[ViewPair], mode: SslMode) -> Result<GradResult> {
    if batch.is_empty() {
        return Err(Error::param("batch", "must be non-empty"));
    }
    match mode {
        SslMode::Contrastive => contrastive_loss(model, batch),
        SslMode::Masked => masked_loss(model, batch),
    }
}

fn contrastive_loss(model: &EncoderModel, batch: &[ViewPair]) -> Result<GradResult> {
    let b = batch.len();
    let mut inputs = Vec::with_capacity(2 * b);
    for pair in batch {
        inputs.push(pair.view_a.clone());
    }
    for pair in batch {
        inputs.push(pair.view_b.clone());
    }
    loss_and_grad(model, &inputs, |feats| {
        let (za, zb) = feats.split_at(b);
        let mut loss = 0.0;
        let mut grads = vec![Vec::new(); 2 * b];
        for i in 0..b {
            let c = stable_cosine(&za[i], &zb[i]);
            if !c.is_finite() {
                return Err(Error::Degenerate(format!(
                    "contrastive cosine for pair {i} is non-finite"
                )));
            }
            loss += (1.0 - c) / b as f64;
            let ga = cosine_grad_wrt_a(&za[i], &zb[i]);
            let gb = cosine_grad_wrt_a(&zb[i], &za[i]);
            grads[i] = ga.iter().map(|g| -g / b as f64).collect();
            grads[b + i] = gb.iter().map(|g| -g / b as f64).collect();
        }
        Ok((loss, grads))
    })
}

fn masked_loss(model: &EncoderModel, batch: &[ViewPair]) -> Result<GradResult> {
    let b = batch.len();
    for (i, pair) in batch.iter().enumerate() {
        let mask = pair.mask.as_ref().ok_or_else(|| {
            Error::param("batch", format!("pair {i} carries no mask in masked mode"))
        })?;
        if !mask.iter().any(|m| *m) {
            return Err(Error::param("batch", format!("pair {i} has an empty mask")));
        }
        if model.feature_dim() != pair.view_a.len() {
            return Err(Error::DimensionMismatch {
                context: "masked reconstruction output",
                expected: pair.view_a.len(),
                got: model.feature_dim(),
            });
        }
    }
    let inputs: Vec<Vec<f64>> = batch.iter().map(|p| p.view_b.clone()).collect();
    loss_and_grad(model, &inputs, |recons| {
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(b);
        for (pair, recon) in batch.iter().zip(recons) {
            let mask = pair.mask.as_ref().unwrap();
            let k = mask.iter().filter(|m| **m).count() as f64;
            let mut g = vec![0.0; recon.len()];
            for j in 0..recon.len() {
                if mask[j] {
                    let diff = recon[j] - pair.view_a[j];
                    loss += diff * diff / (k * b as f64);
                    g[j] = 2.0 * diff / (k * b as f64);
                }
            }
            grads.push(g);
        }
        Ok((loss, grads))
    })
}

/// Feature rows used by probing and similarity: the full forward pass in
/// contrastive mode, the encoder stack below the reconstruction head in
/// masked mode.
pub fn extract_features(
    model: &EncoderModel,
    mode: SslMode,
    pixels: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let layers = mode.feature_layers(model);
    pixels
        .iter()
        .map(|x| model.forward_partial(x, layers))
        .collect()
}
