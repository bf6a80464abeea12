//! Attention-based multiple-instance learning for weakly labelled image bags.
//!
//! The crate is `no_std` (with `alloc`) and carries everything that is pure
//! computation:
//!
//! * [`numcore`] — dense tensors, a reverse-mode tape, the convolutional layer
//!   set, Adam, and min-max patch normalization.
//! * [`milnet`] — the instance feature extractor, attention pooling,
//!   the bag classifier and its binary cross-entropy loss.
//! * [`vbag`] — attention-driven harvesting of key/regular instances and
//!   generation of virtual positive bags.
//! * [`ssl`] — relative and absolute patch-location pretext losses.
//! * [`data`] — bags, the synthetic bag generator and stratified folds.
//! * [`metrics`] — confusion counts, rates, F1 and ROC AUC.
//! * [`train`] — the per-fold training loop and the A–D ablation switches.
//! * [`gradsuite`] — finite-difference checks of every differentiable op.
//!
//! File formats, configuration, the cross-validation runner and the command
//! line live in the `milbag` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod milnet;
pub mod numcore;
pub mod ssl;
pub mod train;
pub mod vbag;

pub use error::{Error, Result};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
