//! Variable-length leaf-spring actuator (VLLSA) model, planar hopping-leg
//! dynamics, virtual model control with stiffness scheduling, and a
//! virtual bench rig for actuator and hopping experiments.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod actuator;
pub mod cli;
pub mod error;
pub mod fsm;
pub mod harness;
pub mod leg;
pub mod vmc;

pub use error::{Result, VllsaError};
