//! Structured channel pruning driven by projective-offset importance scores.
//!
//! Filters are embedded into real projective space as `[‖F‖ : F]`, which puts
//! every filter at the same angular distance (π/4) from the axis of the extra
//! coordinate regardless of its magnitude. One gradient-descent step of the
//! embedded point then decides the score: filters whose step moves them toward
//! that axis score below one and are pruned first.
//!
//! The crate contains everything needed to run that pipeline at desk scale:
//! a small reverse-mode autodiff engine ([`autodiff`]), model graphs with
//! channel-coupling analysis ([`model`]), the projective math
//! ([`projective`]), gradient injection ([`injection`]), importance criteria
//! ([`importance`]), plan/rebuild/fine-tune ([`pruner`]), dataset loading
//! ([`data`]) and the experiment drivers behind the CLI ([`experiments`]).

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiments;
pub mod importance;
pub mod injection;
pub mod model;
pub mod optim;
pub mod projective;
pub mod pruner;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ParamStore, Tensor};
