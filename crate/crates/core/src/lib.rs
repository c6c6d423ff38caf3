//! Outage-constrained hybrid downlink beamforming: scenarios, the duality
//! solver, implicit gradients, the unrolled model, training and baselines.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod error;
pub mod gradcheck;
pub mod implicit;
pub mod linalg;
pub mod neural;
pub mod scenario;
pub mod solver;
pub mod stats;
pub mod training;
pub mod unrolled;
