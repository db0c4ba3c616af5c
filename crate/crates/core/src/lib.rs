//! Average-reward hierarchical option-critic: environments, exact
//! evaluation, the exact policy gradient, the online two-timescale learner
//! and an experiment harness.

#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod error;
pub mod exact;
pub mod gradient;
pub mod harness;
pub mod hierarchy;
pub mod learner;
pub mod mdp;

pub use error::{Error, Result};
