//! Numerical solvers for optimal multi-mode switching when the switching
//! costs are right-continuous step functions of time (so the obstacles of the
//! associated reflected system jump).
//!
//! The suite is organized around one probability space, an exact binary
//! scenario tree, shared by every solver and by the brute-force strategy
//! oracle, so cross-checks compare like with like:
//!
//! * [`cadlag`]: step functions with exact left limits and semicontinuous
//!   envelopes.
//! * [`problem`]: problem instances, assumption probing, exponential driver
//!   transform.
//! * [`lattice`]: time grids with duplicated pre-jump layers, binary trees,
//!   simulated path sets.
//! * [`snell`]: backward dynamic programming for the interconnected
//!   Snell-envelope system and its switch-capped approximants.
//! * [`strategy`]: epsilon-optimal policy extraction, exact policy evaluation,
//!   the enumeration oracle, admissibility bounds.
//! * [`rbsde`]: coupled reflected backward SDE systems with general drivers;
//!   Picard and monotone-stage iterations, bounding solutions, comparison
//!   checks.
//! * [`hjb`]: explicit finite differences for the quasi-variational PDE
//!   system plus weak viscosity residual reports built from exact envelopes.
//! * [`io`]: problem files, run manifests, CSV/JSON exports, crosscheck
//!   driver.

use thiserror::Error;

pub mod cadlag;
pub mod hjb;
pub mod io;
pub mod lattice;
pub mod problem;
pub mod rbsde;
pub mod snell;
pub mod strategy;

/// Crate-wide error type. Variants map onto the CLI exit codes: parse and
/// I/O problems exit 1, domain and size violations exit 2, numerical
/// failures exit 3.
#[derive(Error, Debug)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("size bounds exceeded: {0}")]
    Size(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse(_) | Error::Io(_) => 1,
            Error::Domain(_) | Error::Size(_) => 2,
            Error::Numerical(_) => 3,
        }
    }
}
