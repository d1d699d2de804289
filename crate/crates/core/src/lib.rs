//! Simulation workbench for template-guided transperineal biopsy targeting.
//!
//! The crate covers the voxel anatomy model ([`anatomy`]), template/probe
//! geometry ([`geometry`]), the targeting MDP ([`env`]), the human-designed
//! baseline strategies ([`strategies`]), biopsy metrics and significance tests
//! ([`metrics`]), a hand-written PPO trainer ([`policy`]) and the experiment
//! harness with its wire formats ([`harness`]).

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod anatomy;
pub mod env;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod policy;
pub mod strategies;
