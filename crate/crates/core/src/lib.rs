//! Differentially private SGD with individualized (per-group) privacy budgets.
//!
//! The crate is split along the pipeline a run goes through:
//!
//! * [`accountant`]: Renyi-DP of the subsampled Gaussian mechanism, conversion
//!   to (ε, δ)-DP and per-group spend ledgers.
//! * [`calibration`]: turns a [`calibration::PrivacySpec`] into sample rates,
//!   noise multipliers and clip norms (Sample, Scale and their combination).
//! * [`model`] / [`data`]: small models with exact per-example gradients,
//!   synthetic and CSV datasets, privacy-group assignment.
//! * [`engine`]: the training loop (Poisson sampling, per-example clipping,
//!   Gaussian noising, ledger recording).
//! * [`cli`]: config parsing and the `calibrate` / `train` / `audit` commands.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod calibration;
pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod model;
pub mod rng;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};

/// Opaque label of a privacy group.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub String);

impl GroupId {
    pub fn new(id: impl Into<String>) -> Self {
        GroupId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for GroupId {
    fn from(s: &str) -> Self {
        GroupId(s.to_owned())
    }
}

impl From<String> for GroupId {
    fn from(s: String) -> Self {
        GroupId(s)
    }
}
