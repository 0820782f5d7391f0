//! Solver and verification suite for quantile-dependent McKean-Vlasov
//! equations of degenerate Langevin-chain type.

pub mod cli;
pub mod config;
pub mod density;
pub mod error;
pub mod fk;
pub mod fixpoint;
pub mod flow;
pub mod model;
pub mod particle;
pub mod path;
pub mod rng;
pub mod verify;

pub use error::{Error, Result, Witness};
pub use path::QuantilePath;
