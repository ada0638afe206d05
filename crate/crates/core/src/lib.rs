//! Energy-harvesting MIMO networked control: plant, channel, battery,
//! limiter, estimator, drift-minimizing precoder, stability analysis and a
//! Monte Carlo harness.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod channel;
pub mod cli;
pub mod energy;
pub mod error;
pub mod estimator;
pub mod limiter;
pub mod numerics;
pub mod plant;
pub mod precoder;
pub mod sim;

pub use error::{Error, Result};
