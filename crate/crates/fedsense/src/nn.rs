//! Flat-parameter tanh MLP encoders and hand-derived backpropagation.
//!
//! Models are multi-layer perceptrons with tanh on hidden layers and an
//! identity output layer. Parameters live in a single flat [`ParamVector`]
//! laid out per layer, row-major, weights before biases, layers in order, so
//! the whole model can be aggregated, quantized, and checkpointed as one
//! vector.

use crate::{Error, Result};
use rand::Rng;

/// Flat vector of model parameters. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    /// Elementwise sum.
    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.zip_with(other, "ParamVector::add", |a, b| a + b)
    }

    /// Elementwise difference `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.zip_with(other, "ParamVector::sub", |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| v * factor).collect())
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                context: "ParamVector::dot",
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn zip_with(
        &self,
        other: &ParamVector,
        context: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<ParamVector> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(ParamVector(
            self.0.iter().zip(&other.0).map(|(a, b)| f(*a, *b)).collect(),
        ))
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

/// Loss value paired with its gradient in parameter space.
#[derive(Debug, Clone)]
pub struct GradResult {
    pub loss: f64,
    pub grad: ParamVector,
}

/// Number of parameters an MLP with the given layer widths holds.
pub fn param_count(layer_dims: &[usize]) -> usize {
    layer_dims
        .windows(2)
        .map(|w| w[0] * w[1] + w[1])
        .sum()
}

/// Tanh MLP with identity output activation over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    layer_dims: Vec<usize>,
    params: ParamVector,
}

impl EncoderModel {
    /// Builds a model from explicit parameters, validating the count.
    pub fn new(layer_dims: Vec<usize>, params: ParamVector) -> Result<EncoderModel> {
        validate_dims(&layer_dims)?;
        let expected = param_count(&layer_dims);
        if params.dim() != expected {
            return Err(Error::DimensionMismatch {
                context: "EncoderModel::new",
                expected,
                got: params.dim(),
            });
        }
        Ok(EncoderModel { layer_dims, params })
    }

    pub fn zeros(layer_dims: Vec<usize>) -> Result<EncoderModel> {
        let n = param_count(&layer_dims);
        EncoderModel::new(layer_dims, ParamVector::zeros(n))
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` per layer,
    /// weights drawn row-major before biases.
    pub fn random_init<R: Rng>(layer_dims: Vec<usize>, rng: &mut R) -> Result<EncoderModel> {
        validate_dims(&layer_dims)?;
        let mut values = Vec::with_capacity(param_count(&layer_dims));
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out + fan_out {
                values.push(rng.gen_range(-bound..bound));
            }
        }
        EncoderModel::new(layer_dims, ParamVector(values))
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn into_params(self) -> ParamVector {
        self.params
    }

    /// Replaces the parameters, keeping the architecture.
    pub fn with_params(&self, params: ParamVector) -> Result<EncoderModel> {
        EncoderModel::new(self.layer_dims.clone(), params)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// Full forward pass; output dimension equals the last layer width.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_partial(x, self.num_layers())
    }

    /// Forward through the first `layers` layers only. Hidden layers keep
    /// their tanh; the model's final layer stays identity when included.
    pub fn forward_partial(&self, x: &[f64], layers: usize) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "EncoderModel::forward",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if layers > self.num_layers() {
            return Err(Error::param("layers", "exceeds model depth"));
        }
        let mut h = x.to_vec();
        for l in 0..layers {
            h = self.layer_forward(l, &h)?;
        }
        Ok(h)
    }

    fn layer_forward(&self, l: usize, h: &[f64]) -> Result<Vec<f64>> {
        let (w_off, in_dim, out_dim) = self.layer_offsets(l);
        let p = self.params.values();
        let mut z = vec![0.0; out_dim];
        for j in 0..out_dim {
            let row = &p[w_off + j * in_dim..w_off + (j + 1) * in_dim];
            let mut acc = p[w_off + in_dim * out_dim + j];
            for (wi, hi) in row.iter().zip(h) {
                acc += wi * hi;
            }
            z[j] = if l < self.num_layers() - 1 { acc.tanh() } else { acc };
            if !z[j].is_finite() {
                return Err(Error::NonFinite {
                    context: format!("layer {l} output"),
                });
            }
        }
        Ok(z)
    }

    /// Offset of layer `l`'s weights in the flat vector, plus its shape.
    fn layer_offsets(&self, l: usize) -> (usize, usize, usize) {
        let mut off = 0;
        for k in 0..l {
            off += self.layer_dims[k] * self.layer_dims[k + 1] + self.layer_dims[k + 1];
        }
        (off, self.layer_dims[l], self.layer_dims[l + 1])
    }

    /// Forward with cached activations, for backpropagation.
    fn forward_traced(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "EncoderModel::forward",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut acts = Vec::with_capacity(self.num_layers() + 1);
        acts.push(x.to_vec());
        for l in 0..self.num_layers() {
            let next = self.layer_forward(l, acts.last().unwrap())?;
            acts.push(next);
        }
        Ok(acts)
    }

    /// Accumulates parameter gradients for one sample given `dL/d(output)`.
    fn backward_into(&self, acts: &[Vec<f64>], out_grad: &[f64], grad: &mut [f64]) {
        let num_layers = self.num_layers();
        let p = self.params.values();
        let mut delta = out_grad.to_vec();
        for l in (0..num_layers).rev() {
            let (w_off, in_dim, out_dim) = self.layer_offsets(l);
            // delta currently holds dL/d(post-activation of layer l).
            if l < num_layers - 1 {
                for (d, a) in delta.iter_mut().zip(&acts[l + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            let b_off = w_off + in_dim * out_dim;
            let h = &acts[l];
            for j in 0..out_dim {
                let dj = delta[j];
                let row = &mut grad[w_off + j * in_dim..w_off + (j + 1) * in_dim];
                for (g, hi) in row.iter_mut().zip(h) {
                    *g += dj * hi;
                }
                grad[b_off + j] += dj;
            }
            if l > 0 {
                let mut prev = vec![0.0; in_dim];
                for j in 0..out_dim {
                    let dj = delta[j];
                    let row = &p[w_off + j * in_dim..w_off + (j + 1) * in_dim];
                    for (pi, wi) in prev.iter_mut().zip(row) {
                        *pi += wi * dj;
                    }
                }
                delta = prev;
            }
        }
    }
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::param("layer_dims", "need at least input and output widths"));
    }
    if layer_dims.iter().any(|&d| d == 0) {
        return Err(Error::param("layer_dims", "zero-width layer"));
    }
    Ok(())
}

/// Runs the model on `inputs`, hands the feature rows to `loss_fn`, which
/// returns the loss and `dL/d(feature)` per row, then backpropagates to a
/// full parameter gradient.
pub fn loss_and_grad<F>(model: &EncoderModel, inputs: &[Vec<f64>], loss_fn: F) -> Result<GradResult>
where
    F: FnOnce(&[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    let traces: Vec<Vec<Vec<f64>>> = inputs
        .iter()
        .map(|x| model.forward_traced(x))
        .collect::<Result<_>>()?;
    let features: Vec<Vec<f64>> = traces.iter().map(|t| t.last().unwrap().clone()).collect();
    let (loss, feature_grads) = loss_fn(&features)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "loss".to_string(),
        });
    }
    if feature_grads.len() != inputs.len() {
        return Err(Error::DimensionMismatch {
            context: "loss_and_grad feature grads",
            expected: inputs.len(),
            got: feature_grads.len(),
        });
    }
    let mut grad = vec![0.0; model.params().dim()];
    for (trace, fg) in traces.iter().zip(&feature_grads) {
        model.backward_into(trace, fg, &mut grad);
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "gradient".to_string(),
        });
    }
    Ok(GradResult {
        loss,
        grad: ParamVector(grad),
    })
}

/// One plain SGD step: `params - lr * grad`. A zero `lr` is a no-op, kept
/// legal for diagnostics.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
    if !(lr >= 0.0) {
        return Err(Error::param("lr", "must be >= 0"));
    }
    let stepped = params.zip_with(grad, "sgd_step", |p, g| p - lr * g)?;
    if stepped.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "sgd_step output".to_string(),
        });
    }
    Ok(stepped)
}
