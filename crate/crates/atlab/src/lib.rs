//! # atlab
//!
//! A desk-scale acoustic-model laboratory: a from-scratch encoder-decoder
//! transformer over synthetic multi-speaker text-to-frames data, built to
//! study and stress three alignment techniques:
//!
//! - a diagonal constraint on encoder-decoder attention during training,
//!   plus a sliding attention window during autoregressive inference,
//! - layer normalization of token embeddings before positional addition
//!   in the encoder,
//! - a narrow bottleneck in the decoder pre-net that blocks frame copying.
//!
//! Everything runs on a small reverse-mode autodiff tape in `f64`, so every
//! gradient in the system can be checked against finite differences.
//!
//! The crate is organized as:
//!
//! - [`tensor`]: dense tensors, the autodiff tape, Adam, the warmup schedule,
//!   parameter initialization and checkpoint serialization,
//! - [`alignment`]: the diagonal band, attention rate, constraint loss, and
//!   the inference sliding-window state machine,
//! - [`model`]: the acoustic model itself (encoder, decoder, speaker module),
//! - [`synthdata`]: the deterministic synthetic multi-speaker task,
//! - [`trainer`]: training, evaluation, and the ablation harness,
//! - [`config`] / [`cli`]: key=value config files and the command line.

pub mod alignment;
pub mod cli;
pub mod config;
pub mod error;
pub mod model;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
