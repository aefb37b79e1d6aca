//! Compressed Stochastic Gradient: bit-budgeted update compression with
//! momentum error feedback.
//!
//! An update vector is compressed to `norm * sign * level / s` per
//! coordinate, where levels are drawn stochastically so the reconstruction
//! is unbiased given the stored norm. The residual of each round feeds an
//! exponentially averaged error accumulator that is added to the next
//! update before compression and zeroed on a fixed reset period.
//!
//! Special cases: 32 bits is a lossless passthrough of the raw values, and
//! 1 bit transmits signs with the norm field scaled down to `||g|| / sqrt(d)`
//! so the reconstruction preserves the update norm instead of inflating it
//! by `sqrt(d)` (which would make the feedback loop diverge).

use crate::nn::ParamVector;
use crate::{Error, Result};
use rand::Rng;

pub const MIN_BITS: u8 = 1;
pub const MAX_BITS: u8 = 32;
const WIRE_MAGIC: &[u8; 4] = b"CSGQ";
/// Fixed header: magic, bit width, dimension, norm field.
const WIRE_HEADER: usize = 13;

/// How levels are assigned at a given bit budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantScheme {
    /// Stochastic level rounding; pair with error feedback.
    Stochastic,
    /// Deterministic nearest-level rounding; baseline without feedback.
    Uniform,
}

/// Number of magnitude levels at a bit width: `max(2^(bits-1) - 1, 1)`.
pub fn level_scale(bits: u8) -> u32 {
    if bits <= 1 {
        1
    } else {
        (1u32 << (bits - 1)) - 1
    }
}

/// Bits used to store one magnitude level on the wire.
fn level_bits(bits: u8) -> usize {
    (bits as usize).saturating_sub(1).max(1)
}

fn validate_bits(bits: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::param("csg.bits", "must satisfy 1 <= bits <= 32"));
    }
    Ok(())
}

/// Exact size in bytes of the wire encoding for a given width and dimension.
pub fn wire_len(bits: u8, dim: usize) -> usize {
    if bits == 32 {
        WIRE_HEADER + 8 * dim
    } else {
        WIRE_HEADER + dim.div_ceil(8) + (dim * level_bits(bits)).div_ceil(8)
    }
}

/// A compressed update, exactly what travels over the wire.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantizedUpdate {
    /// 32-bit passthrough: the raw values, bit for bit.
    Raw(Vec<f64>),
    /// Norm, per-coordinate sign (`true` = negative) and magnitude level.
    Levels {
        bits: u8,
        norm: f32,
        signs: Vec<bool>,
        levels: Vec<u32>,
    },
}

impl QuantizedUpdate {
    pub fn bits(&self) -> u8 {
        match self {
            QuantizedUpdate::Raw(_) => 32,
            QuantizedUpdate::Levels { bits, .. } => *bits,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            QuantizedUpdate::Raw(v) => v.len(),
            QuantizedUpdate::Levels { levels, .. } => levels.len(),
        }
    }
}

/// Compresses `g` to `bits`. Stochastic rounding consumes exactly one
/// uniform draw per coordinate, in index order; the 1-bit and 32-bit paths
/// and the uniform scheme consume none.
pub fn cpr<R: Rng>(
    g: &ParamVector,
    bits: u8,
    scheme: QuantScheme,
    rng: &mut R,
) -> Result<QuantizedUpdate> {
    validate_bits(bits)?;
    if bits == 32 {
        return Ok(QuantizedUpdate::Raw(g.values().to_vec()));
    }
    let dim = g.dim();
    let norm = g.norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            context: "update norm before compression".into(),
        });
    }
    let signs: Vec<bool> = g.values().iter().map(|v| *v < 0.0).collect();
    if bits == 1 {
        // Sign-only: scale the norm down so the reconstruction keeps the
        // original l2 norm.
        return Ok(QuantizedUpdate::Levels {
            bits,
            norm: (norm / (dim as f64).sqrt()) as f32,
            signs,
            levels: vec![1; dim],
        });
    }
    let s = level_scale(bits);
    let mut levels = Vec::with_capacity(dim);
    if norm == 0.0 {
        levels.resize(dim, 0);
    } else {
        for v in g.values() {
            let exact = (v.abs() / norm) * s as f64;
            let level = match scheme {
                QuantScheme::Stochastic => {
                    let low = exact.floor();
                    let up = rng.gen::<f64>() < exact - low;
                    low as u32 + up as u32
                }
                QuantScheme::Uniform => exact.round() as u32,
            };
            levels.push(level.min(s));
        }
    }
    Ok(QuantizedUpdate::Levels {
        bits,
        norm: norm as f32,
        signs,
        levels,
    })
}

/// Reconstructs the dense update a compressed form stands for.
pub fn dcpr(q: &QuantizedUpdate) -> ParamVector {
    match q {
        QuantizedUpdate::Raw(values) => ParamVector::new(values.clone()),
        QuantizedUpdate::Levels {
            bits,
            norm,
            signs,
            levels,
        } => {
            let s = level_scale(*bits) as f64;
            let n = *norm as f64;
            let values = signs
                .iter()
                .zip(levels)
                .map(|(neg, l)| {
                    let mag = n * (*l as f64) / s;
                    if *neg {
                        -mag
                    } else {
                        mag
                    }
                })
                .collect();
            ParamVector::new(values)
        }
    }
}

struct BitWriter {
    bytes: Vec<u8>,
    bit: usize,
}

impl BitWriter {
    fn new() -> BitWriter {
        BitWriter {
            bytes: Vec::new(),
            bit: 0,
        }
    }

    fn push(&mut self, value: u32, nbits: usize) {
        for j in 0..nbits {
            if self.bit % 8 == 0 {
                self.bytes.push(0);
            }
            if (value >> j) & 1 == 1 {
                self.bytes[self.bit / 8] |= 1 << (self.bit % 8);
            }
            self.bit += 1;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    bit: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> BitReader<'a> {
        BitReader { bytes, bit: 0 }
    }

    fn read(&mut self, nbits: usize) -> Result<u32> {
        let mut value = 0u32;
        for j in 0..nbits {
            let idx = self.bit / 8;
            if idx >= self.bytes.len() {
                return Err(Error::Wire("bit stream ended early".into()));
            }
            if (self.bytes[idx] >> (self.bit % 8)) & 1 == 1 {
                value |= 1 << j;
            }
            self.bit += 1;
        }
        Ok(value)
    }

    /// Rejects set bits in the final partial byte so every wire image has
    /// one canonical encoding.
    fn finish(self) -> Result<()> {
        let mut bit = self.bit;
        while bit % 8 != 0 {
            if (self.bytes[bit / 8] >> (bit % 8)) & 1 == 1 {
                return Err(Error::Wire("nonzero padding bits".into()));
            }
            bit += 1;
        }
        Ok(())
    }
}

/// Serializes a compressed update: magic, bit width, dimension, norm, then
/// for sub-32-bit forms a byte-aligned sign section and a byte-aligned
/// level section (low bits first); the 32-bit form carries raw values.
pub fn encode_wire(q: &QuantizedUpdate) -> Vec<u8> {
    let mut out = Vec::with_capacity(wire_len(q.bits(), q.dim()));
    out.extend_from_slice(WIRE_MAGIC);
    match q {
        QuantizedUpdate::Raw(values) => {
            out.push(32);
            out.extend_from_slice(&(values.len() as u32).to_le_bytes());
            let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt() as f32;
            out.extend_from_slice(&norm.to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        QuantizedUpdate::Levels {
            bits,
            norm,
            signs,
            levels,
        } => {
            out.push(*bits);
            out.extend_from_slice(&(levels.len() as u32).to_le_bytes());
            out.extend_from_slice(&norm.to_le_bytes());
            let mut sign_section = BitWriter::new();
            for neg in signs {
                sign_section.push(*neg as u32, 1);
            }
            out.extend_from_slice(&sign_section.bytes);
            let lb = level_bits(*bits);
            let mut level_section = BitWriter::new();
            for l in levels {
                level_section.push(*l, lb);
            }
            out.extend_from_slice(&level_section.bytes);
        }
    }
    out
}

pub fn decode_wire(bytes: &[u8]) -> Result<QuantizedUpdate> {
    if bytes.len() < WIRE_HEADER {
        return Err(Error::Wire("shorter than the fixed header".into()));
    }
    if &bytes[0..4] != WIRE_MAGIC {
        return Err(Error::Wire("bad magic".into()));
    }
    let bits = bytes[4];
    validate_bits(bits).map_err(|_| Error::Wire("bits out of range".into()))?;
    let dim = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let norm = f32::from_le_bytes(bytes[9..13].try_into().unwrap());
    if bytes.len() != wire_len(bits, dim) {
        return Err(Error::Wire(format!(
            "expected {} bytes for {} bits at dimension {}, got {}",
            wire_len(bits, dim),
            bits,
            dim,
            bytes.len()
        )));
    }
    if bits == 32 {
        let values = bytes[WIRE_HEADER..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect::<Vec<f64>>();
        for v in &values {
            if !v.is_finite() {
                return Err(Error::Wire("non-finite raw value".into()));
            }
        }
        return Ok(QuantizedUpdate::Raw(values));
    }
    if !norm.is_finite() || norm < 0.0 {
        return Err(Error::Wire("norm field must be finite and non-negative".into()));
    }
    let sign_bytes = dim.div_ceil(8);
    let mut sign_section = BitReader::new(&bytes[WIRE_HEADER..WIRE_HEADER + sign_bytes]);
    let mut signs = Vec::with_capacity(dim);
    for _ in 0..dim {
        signs.push(sign_section.read(1)? == 1);
    }
    sign_section.finish()?;
    let lb = level_bits(bits);
    let mut level_section = BitReader::new(&bytes[WIRE_HEADER + sign_bytes..]);
    let mut levels = Vec::with_capacity(dim);
    for _ in 0..dim {
        levels.push(level_section.read(lb)?);
    }
    level_section.finish()?;
    Ok(QuantizedUpdate::Levels {
        bits,
        norm,
        signs,
        levels,
    })
}

/// Outcome of folding one round's residual into the accumulator.
#[derive(Debug, Clone, Copy)]
pub struct FeedbackUpdateInfo {
    /// Norm of this round's instantaneous residual.
    pub residual_norm: f64,
    /// Norm of the accumulator after the update (zero right after a reset).
    pub error_norm: f64,
    pub was_reset: bool,
}

/// Exponentially averaged compression-error accumulator with periodic
/// resets.
#[derive(Debug, Clone)]
pub struct FeedbackState {
    alpha: f64,
    reset_period: usize,
    error: ParamVector,
    rounds_since_reset: usize,
}

impl FeedbackState {
    pub fn new(dim: usize, alpha: f64, reset_period: usize) -> Result<FeedbackState> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::param("csg.alpha", "must satisfy 0 <= alpha < 1"));
        }
        if reset_period == 0 {
            return Err(Error::param("csg.reset_period", "must be >= 1"));
        }
        Ok(FeedbackState {
            alpha,
            reset_period,
            error: ParamVector::zeros(dim),
            rounds_since_reset: 0,
        })
    }

    pub fn error(&self) -> &ParamVector {
        &self.error
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// The update actually handed to the compressor: `delta + error`.
    pub fn compensate(&self, delta: &ParamVector) -> Result<ParamVector> {
        delta.add(&self.error)
    }

    /// Folds in the residual `sent - reconstructed` of the round, then
    /// applies the periodic reset once the period is complete.
    pub fn update(
        &mut self,
        sent: &ParamVector,
        reconstructed: &ParamVector,
    ) -> Result<FeedbackUpdateInfo> {
        let residual = sent.sub(reconstructed)?;
        let residual_norm = residual.norm();
        self.error = self
            .error
            .scale(self.alpha)
            .add(&residual.scale(1.0 - self.alpha))?;
        self.rounds_since_reset += 1;
        let was_reset = self.rounds_since_reset >= self.reset_period;
        if was_reset {
            self.error = ParamVector::zeros(self.error.dim());
            self.rounds_since_reset = 0;
        }
        Ok(FeedbackUpdateInfo {
            residual_norm,
            error_norm: self.error.norm(),
            was_reset,
        })
    }
}
