//! PI-SONet: a structure-preserving operator pipeline for parameterized
//! multi-agent optimal-control families. A tractable latent Hamiltonian system
//! is solved exactly by matrix exponentials and decoded into physical
//! state–costate trajectories by a conditional symplectic shear network
//! trained on Pontryagin residuals.

pub mod cli;
pub mod decoder;
pub mod eikonal;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod hamiltonian;
pub mod latent;
pub mod oracle;
pub mod persist;
pub mod phase;
pub mod scalar;
pub mod scenario;
pub mod svg;
pub mod train;

pub use error::{Error, Result};

/// Entry point for the `pisonet` binary; returns the process exit code.
pub fn cli_main() -> i32 {
    cli::run()
}
