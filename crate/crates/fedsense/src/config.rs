//! Flat `section.key = value` experiment configuration.
//!
//! Lines hold one assignment each; `#` starts a comment; unknown keys are
//! rejected; later assignments win. [`ExperimentConfig::resolved_text`]
//! prints every key back in a fixed order, which is what the run artifacts
//! record.

use crate::csg::QuantScheme;
use crate::probe::ProbeConfig;
use crate::scg::ScgConfig;
use crate::ssl::{DataSpec, SslMode};
use crate::{Error, Result};
use std::path::Path;

/// What the clients minimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    /// The full self-supervised protocol.
    Ssl,
    /// Per-client quadratic surrogate used by the convergence harness.
    Quadratic,
}

/// Every knob of one federated run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub rounds: usize,
    pub clients: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of clients drawn each round, in `(0, 1]`.
    pub participation: f64,
    pub objective: ObjectiveKind,
    /// Worker threads for client training; 0 picks the process default.
    pub threads: usize,
    pub mode: SslMode,
    pub mask_ratio: f64,
    /// One entry shared by every client, or one entry per client.
    pub samples_per_client: Vec<usize>,
    pub public_samples: usize,
    pub heterogeneity: f64,
    pub domains: usize,
    /// Encoder widths, input first. Masked mode appends its reconstruction
    /// head automatically.
    pub model_dims: Vec<usize>,
    pub scg: ScgConfig,
    pub bits: u8,
    pub alpha: f64,
    pub reset_period: usize,
    pub scheme: QuantScheme,
    pub clusters: usize,
    pub distill_steps: usize,
    pub distill_batch: usize,
    pub distill_lr: f64,
    pub uni_pretrain_steps: usize,
    pub probe: ProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            rounds: 100,
            clients: 10,
            local_epochs: 1,
            batch_size: 32,
            seed: 42,
            participation: 1.0,
            objective: ObjectiveKind::Ssl,
            threads: 0,
            mode: SslMode::Contrastive,
            mask_ratio: 0.5,
            samples_per_client: vec![64],
            public_samples: 32,
            heterogeneity: 0.5,
            domains: 6,
            model_dims: vec![64, 32, 16],
            scg: ScgConfig::default(),
            bits: 32,
            alpha: 0.9,
            reset_period: 10,
            scheme: QuantScheme::Stochastic,
            clusters: 3,
            distill_steps: 5,
            distill_batch: 32,
            distill_lr: 0.05,
            uni_pretrain_steps: 200,
            probe: ProbeConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, what: &'static str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidParameter {
            name: key.to_string(),
            reason: format!("expected {what}, got {value:?}"),
        })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|part| parse_num(key, part, "a comma-separated list of integers"))
        .collect()
}

impl ExperimentConfig {
    /// Applies one typed assignment; the value is still unvalidated as a
    /// whole until [`validate`](Self::validate).
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "run.rounds" => self.rounds = parse_num(key, v, "an integer")?,
            "run.clients" => self.clients = parse_num(key, v, "an integer")?,
            "run.local_epochs" => self.local_epochs = parse_num(key, v, "an integer")?,
            "run.batch_size" => self.batch_size = parse_num(key, v, "an integer")?,
            "run.seed" => self.seed = parse_num(key, v, "an integer")?,
            "run.participation" => self.participation = parse_num(key, v, "a number")?,
            "run.objective" => {
                self.objective = match v {
                    "ssl" => ObjectiveKind::Ssl,
                    "quadratic" => ObjectiveKind::Quadratic,
                    _ => {
                        return Err(Error::InvalidParameter {
                            name: key.to_string(),
                            reason: format!("expected ssl or quadratic, got {v:?}"),
                        })
                    }
                }
            }
            "run.threads" => self.threads = parse_num(key, v, "an integer")?,
            "ssl.mode" => {
                self.mode = match v {
                    "contrastive" => SslMode::Contrastive,
                    "masked" => SslMode::Masked,
                    _ => {
                        return Err(Error::InvalidParameter {
                            name: key.to_string(),
                            reason: format!("expected contrastive or masked, got {v:?}"),
                        })
                    }
                }
            }
            "ssl.mask_ratio" => self.mask_ratio = parse_num(key, v, "a number")?,
            "data.samples_per_client" => self.samples_per_client = parse_list(key, v)?,
            "data.public_samples" => self.public_samples = parse_num(key, v, "an integer")?,
            "data.heterogeneity" => self.heterogeneity = parse_num(key, v, "a number")?,
            "data.domains" => self.domains = parse_num(key, v, "an integer")?,
            "model.dims" => self.model_dims = parse_list(key, v)?,
            "scg.beta" => self.scg.beta = parse_num(key, v, "a number")?,
            "scg.lambda" => self.scg.lambda = parse_num(key, v, "a number")?,
            "scg.rho" => self.scg.rho = parse_num(key, v, "a number")?,
            "scg.gamma" => self.scg.gamma = parse_num(key, v, "a number")?,
            "scg.sst_weight" => self.scg.sst_weight = parse_num(key, v, "a number")?,
            "csg.bits" => self.bits = parse_num(key, v, "an integer")?,
            "csg.alpha" => self.alpha = parse_num(key, v, "a number")?,
            "csg.reset_period" => self.reset_period = parse_num(key, v, "an integer")?,
            "csg.scheme" => {
                self.scheme = match v {
                    "stochastic" => QuantScheme::Stochastic,
                    "uniform" => QuantScheme::Uniform,
                    _ => {
                        return Err(Error::InvalidParameter {
                            name: key.to_string(),
                            reason: format!("expected stochastic or uniform, got {v:?}"),
                        })
                    }
                }
            }
            "server.clusters" => self.clusters = parse_num(key, v, "an integer")?,
            "server.distill_steps" => self.distill_steps = parse_num(key, v, "an integer")?,
            "server.distill_batch" => self.distill_batch = parse_num(key, v, "an integer")?,
            "server.distill_lr" => self.distill_lr = parse_num(key, v, "a number")?,
            "server.uni_pretrain_steps" => {
                self.uni_pretrain_steps = parse_num(key, v, "an integer")?
            }
            "probe.train_samples" => self.probe.train_samples = parse_num(key, v, "an integer")?,
            "probe.test_samples" => self.probe.test_samples = parse_num(key, v, "an integer")?,
            "probe.steps" => self.probe.steps = parse_num(key, v, "an integer")?,
            "probe.lr" => self.probe.lr = parse_num(key, v, "a number")?,
            _ => return Err(Error::UnknownConfigKey(key.to_string())),
        }
        Ok(())
    }

    /// Parses a whole config text. Line numbers are 1-based in errors.
    pub fn parse_text(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let stripped = stripped.trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((key, value)) = stripped.split_once('=') else {
                return Err(Error::ConfigParse {
                    line,
                    msg: format!("expected `key = value`, got {stripped:?}"),
                });
            };
            cfg.apply(key.trim(), value).map_err(|e| Error::ConfigParse {
                line,
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::param("run.rounds", "must be >= 1"));
        }
        if self.clients == 0 {
            return Err(Error::param("run.clients", "must be >= 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::param("run.local_epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("run.batch_size", "must be >= 1"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::param("run.participation", "must be in (0, 1]"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::param("ssl.mask_ratio", "must be in (0, 1)"));
        }
        if self.samples_per_client.is_empty()
            || (self.samples_per_client.len() != 1
                && self.samples_per_client.len() != self.clients)
        {
            return Err(Error::param(
                "data.samples_per_client",
                "need one shared size or exactly one per client",
            ));
        }
        if self.samples_per_client.iter().any(|&n| n == 0) {
            return Err(Error::param("data.samples_per_client", "sizes must be >= 1"));
        }
        if self.public_samples == 0 {
            return Err(Error::param("data.public_samples", "must be >= 1"));
        }
        if !(self.heterogeneity > 0.0) {
            return Err(Error::param("data.heterogeneity", "must be > 0"));
        }
        if self.domains == 0 {
            return Err(Error::param("data.domains", "must be >= 1"));
        }
        if self.model_dims.len() < 2 || self.model_dims.iter().any(|&d| d == 0) {
            return Err(Error::param(
                "model.dims",
                "need input plus at least one layer, all widths >= 1",
            ));
        }
        let side = (self.model_dims[0] as f64).sqrt().round() as usize;
        if side * side != self.model_dims[0] {
            return Err(Error::param("model.dims", "input width must be a perfect square"));
        }
        self.scg.validate()?;
        if !(1..=32).contains(&self.bits) {
            return Err(Error::param("csg.bits", "must satisfy 1 <= bits <= 32"));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::param("csg.alpha", "must satisfy 0 <= alpha < 1"));
        }
        if self.reset_period == 0 {
            return Err(Error::param("csg.reset_period", "must be >= 1"));
        }
        if self.clusters == 0 {
            return Err(Error::param("server.clusters", "must be >= 1"));
        }
        if self.distill_batch == 0 {
            return Err(Error::param("server.distill_batch", "must be >= 1"));
        }
        if !(self.distill_lr >= 0.0) {
            return Err(Error::param("server.distill_lr", "must be >= 0"));
        }
        self.probe.validate()?;
        Ok(())
    }

    /// Shard size per client, with a single shared entry broadcast to all.
    pub fn shard_sizes(&self) -> Vec<usize> {
        if self.samples_per_client.len() == 1 {
            vec![self.samples_per_client[0]; self.clients]
        } else {
            self.samples_per_client.clone()
        }
    }

    pub fn data_spec(&self) -> DataSpec {
        DataSpec {
            num_domains: self.domains,
            patch_dim: self.model_dims[0],
            heterogeneity: self.heterogeneity,
            samples_per_client: self.shard_sizes(),
            public_samples: self.public_samples,
        }
    }

    /// Canonical dump of every key, suitable for reparsing and stable
    /// across reruns of the same configuration.
    pub fn resolved_text(&self) -> String {
        let list = |values: &[usize]| {
            values
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("run.rounds", self.rounds.to_string());
        push("run.clients", self.clients.to_string());
        push("run.local_epochs", self.local_epochs.to_string());
        push("run.batch_size", self.batch_size.to_string());
        push("run.seed", self.seed.to_string());
        push("run.participation", self.participation.to_string());
        push(
            "run.objective",
            match self.objective {
                ObjectiveKind::Ssl => "ssl".into(),
                ObjectiveKind::Quadratic => "quadratic".into(),
            },
        );
        push("run.threads", self.threads.to_string());
        push(
            "ssl.mode",
            match self.mode {
                SslMode::Contrastive => "contrastive".into(),
                SslMode::Masked => "masked".into(),
            },
        );
        push("ssl.mask_ratio", self.mask_ratio.to_string());
        push("data.samples_per_client", list(&self.samples_per_client));
        push("data.public_samples", self.public_samples.to_string());
        push("data.heterogeneity", self.heterogeneity.to_string());
        push("data.domains", self.domains.to_string());
        push("model.dims", list(&self.model_dims));
        push("scg.beta", self.scg.beta.to_string());
        push("scg.lambda", self.scg.lambda.to_string());
        push("scg.rho", self.scg.rho.to_string());
        push("scg.gamma", self.scg.gamma.to_string());
        push("scg.sst_weight", self.scg.sst_weight.to_string());
        push("csg.bits", self.bits.to_string());
        push("csg.alpha", self.alpha.to_string());
        push("csg.reset_period", self.reset_period.to_string());
        push(
            "csg.scheme",
            match self.scheme {
                QuantScheme::Stochastic => "stochastic".into(),
                QuantScheme::Uniform => "uniform".into(),
            },
        );
        push("server.clusters", self.clusters.to_string());
        push("server.distill_steps", self.distill_steps.to_string());
        push("server.distill_batch", self.distill_batch.to_string());
        push("server.distill_lr", self.distill_lr.to_string());
        push("server.uni_pretrain_steps", self.uni_pretrain_steps.to_string());
        push("probe.train_samples", self.probe.train_samples.to_string());
        push("probe.test_samples", self.probe.test_samples.to_string());
        push("probe.steps", self.probe.steps.to_string());
        push("probe.lr", self.probe.lr.to_string());
        out
    }
}
