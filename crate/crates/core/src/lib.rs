//! Flexible stacked intelligent metasurface downlink: channel model,
//! joint morphing / precoder / meta-atom response optimization, and
//! Monte-Carlo experiment harness.

// `!(x > 0.0)` style tests are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ao;
pub mod bf_opt;
pub mod channel;
pub mod error;
pub mod geometry;
pub mod gradients;
pub mod harness;
pub mod metrics;
pub mod morph_opt;
pub mod oracle;
pub mod perturbation;
pub mod phase_opt;
pub mod sca;
pub mod scenario;
pub mod validate;

pub use error::{Error, Result};
