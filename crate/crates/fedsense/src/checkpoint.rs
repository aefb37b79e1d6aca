//! Binary checkpoint formats.
//!
//! Parameters: magic `FSNS`, version byte `1`, a `u32` little-endian count,
//! then that many IEEE-754 little-endian `f32` values. Shards use the same
//! container with a `u32` sample count and `u32` sample dimension, each
//! sample stored as its pixels followed by the domain id as a trailing
//! float. Decoding then re-encoding reproduces the file byte for byte;
//! in-memory `f64` values are narrowed to `f32` on save.

use crate::nn::ParamVector;
use crate::ssl::{Sample, Shard};
use crate::{Error, Result};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FSNS";
const VERSION: u8 = 1;

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Reader<'a> {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(err(format!(
                "truncated: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn header(&mut self) -> Result<()> {
        if self.take(4)? != MAGIC {
            return Err(err("bad magic, expected FSNS"));
        }
        let version = self.take(1)?[0];
        if version != VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(err(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_params(params: &ParamVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * params.dim());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(params.dim() as u32).to_le_bytes());
    for v in params.values() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamVector> {
    let mut r = Reader::new(bytes);
    r.header()?;
    let count = r.u32()? as usize;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(r.f32()? as f64);
    }
    r.finish()?;
    Ok(ParamVector::new(values))
}

pub fn save_params(path: impl AsRef<Path>, params: &ParamVector) -> Result<()> {
    std::fs::write(path, encode_params(params))?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamVector> {
    decode_params(&std::fs::read(path)?)
}

pub fn encode_shard(shard: &Shard) -> Result<Vec<u8>> {
    let dim = shard.samples()[0].pixels.len();
    let mut out = Vec::with_capacity(13 + shard.len() * (dim + 1) * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(shard.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for sample in shard.samples() {
        if sample.pixels.len() != dim {
            return Err(err(format!(
                "ragged shard: sample has {} pixels, expected {dim}",
                sample.pixels.len()
            )));
        }
        for p in &sample.pixels {
            out.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        out.extend_from_slice(&(sample.domain_id as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_shard(bytes: &[u8]) -> Result<Shard> {
    let mut r = Reader::new(bytes);
    r.header()?;
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pixels = Vec::with_capacity(dim);
        for _ in 0..dim {
            pixels.push(r.f32()? as f64);
        }
        let raw_domain = r.f32()?;
        if raw_domain < 0.0 || raw_domain.fract() != 0.0 {
            return Err(err(format!("invalid domain id {raw_domain}")));
        }
        samples.push(Sample {
            pixels,
            domain_id: raw_domain as usize,
        });
    }
    r.finish()?;
    Shard::new(samples)
}

pub fn save_shard(path: impl AsRef<Path>, shard: &Shard) -> Result<()> {
    std::fs::write(path, encode_shard(shard)?)?;
    Ok(())
}

pub fn load_shard(path: impl AsRef<Path>) -> Result<Shard> {
    decode_shard(&std::fs::read(path)?)
}
