//! Learned inverse operators, their classical baselines and exact Bayes references.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baselines;
pub mod datagen;
pub mod error;
pub mod experiments;
pub mod forward;
pub mod io;
pub mod networks;
pub mod numerics;
pub mod oracle;
pub mod priors;
pub mod rng;

pub use error::{Error, Result};
