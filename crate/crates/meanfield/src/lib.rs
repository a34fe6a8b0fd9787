//! Particle methods for mean-field forward-backward SDEs, stochastic maximum principle
//! control and Nash games.

pub mod cli;
pub mod core;
pub mod error;
pub mod fbsde_solver;
pub mod forward_mv;
pub mod games;
pub mod hypothesis_check;
pub mod lq_examples;
pub mod mf_bsde;
pub mod smp_control;

pub use error::{Error, Result};
