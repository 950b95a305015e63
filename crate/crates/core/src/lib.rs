//! Shared-weight wide-and-deep feed-forward blocks for transformer language
//! models.
//!
//! One SwiGLU feed-forward weight set per layer is reused two ways:
//!
//! * **width**: `N` virtual experts, each a contiguous slice of the hidden
//!   dimension, combined with top-K routing ([`width`]);
//! * **depth**: the full FFN applied recursively up to `L_max` times, with a
//!   per-token loop count predicted by a Gumbel-Softmax head ([`depth`]).
//!
//! The two outputs are fused per token with a weight derived from the
//! expected loop count ([`layer`]). Around the block sit a small reverse-mode
//! autodiff engine ([`autodiff`]), the standard transformer pieces ([`nn`]),
//! parameter/FLOPs accounting ([`accounting`]), a training loop with AdamW
//! and checkpoints ([`train`], [`checkpoint`]), and the data and command
//! plumbing behind the `vffn` binary ([`data`], [`commands`]).

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accounting;
pub mod autodiff;
pub mod chart;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod depth;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layer;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod width;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{DType, Real, Tensor};
