//! Semi-supervised few-shot classification on synthetic episodes, trained by
//! meta-learning a self-training inner loop end to end.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: tape-based reverse-mode AD whose backward passes emit
//!   differentiable nodes, so unrolled inner-loop updates expose exact
//!   meta-gradients.
//! - [`episodes`]: synthetic Gaussian-cluster datasets, class splits, and
//!   semi-supervised episode sampling with distractor classes.
//! - [`model`]: a frozen pretrained backbone plus the small set of adapted
//!   parameters (scale-shift modulation, linear classifier head, soft
//!   weighting network).
//! - [`selftrain`]: the inner self-training loop (pseudo-label, select,
//!   weight, re-train, fine-tune), its recursive/mixing variants, and the
//!   two-rate meta-update that trains the whole thing.
//! - [`config`], [`checkpoint`], [`metrics`], [`harness`]: the experiment
//!   surface used by the `lst` binary.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod episodes;
pub mod error;
pub mod rng;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod selftrain;

pub use error::{Error, Result};
