//! Inference-time personalization of frozen image generators from a single
//! reference subject image.
//!
//! The crate is `no_std` (with `alloc`). It contains the numerical core:
//! reverse-mode differentiation, low-rank adapters, the analytic toy
//! backbone, identity and background losses, the optimization loop with
//! early stopping, subject-mask algebra, the two end-to-end workflows and
//! the evaluation metrics. File formats, model loading, the CLI and the
//! session service live in the `imprint` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adapters;
pub mod autodiff;
pub mod backbone;
pub mod engine;
mod error;
pub mod extractors;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod segmentation;
pub mod tensor;
pub mod workflows;

pub use error::{Error, Result};
