//! Deterministic desk-scale simulator of the FedSense federated
//! self-supervised pre-training protocol.
//!
//! FedSense couples three mechanisms around a standard FedAvg loop over
//! self-supervised encoders:
//!
//! * **Server-to-Clients Guidance** ([`scg`]): each client perturbs its
//!   parameters along the direction of maximal discrepancy growth before
//!   computing gradients, and aligns its features to a frozen universal
//!   encoder (self-stabilization).
//! * **Clients-to-Server Guidance** ([`csg`]): model updates are compressed
//!   with a norm/sign/stochastic-level quantizer; a momentum error-feedback
//!   accumulator re-injects what quantization lost.
//! * **Clustered similarity distillation** ([`server`]): the server groups
//!   client models, builds a consensus feature-similarity matrix on public
//!   data, and distills the aggregated global model toward it.
//!
//! Everything is driven by explicit seeds and fixed-order reductions, so a
//! federation run is reproducible byte for byte, including under client
//! parallelism ([`sim`]).

pub mod checkpoint;
pub mod config;
pub mod csg;
mod error;
pub mod experiments;
pub mod nn;
pub mod probe;
pub mod scg;
pub mod server;
pub mod sim;
pub mod ssl;

pub use error::{Error, Result};
