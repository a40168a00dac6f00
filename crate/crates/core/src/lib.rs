//! Closed-loop multi-agent task planning for tabletop manipulation.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agents;
pub mod backends;
pub mod detection;
pub mod geometry;
pub mod orchestrator;
pub mod runner;
pub mod simulator;
pub mod state;
pub mod testing;
pub mod trace;
