//! Simulation and tomography toolkit for Fock-state filtration (FSF), a
//! heralded quantum operation that suppresses a chosen photon-number
//! amplitude of a single optical mode.
//!
//! The crate is organized around the stages of a characterization run:
//!
//! - [`fock`] — truncated single-mode Fock-space numerics (states,
//!   quadrature wavefunctions, random states) plus the two-mode
//!   beam-splitter unitary used as an independent oracle for the
//!   closed-form herald amplitudes.
//! - [`model`] — the realistic FSF process model: herald-detector POVM,
//!   beam-splitter amplitudes, the component process tensors and their
//!   composition, process application, and conditional photon statistics.
//! - [`homodyne`] — synthetic heralded balanced-homodyne data: quadrature
//!   sampling of filtered probe states over a swept local-oscillator
//!   phase, binning, and dataset persistence.
//! - [`tomography`] — maximum-likelihood coherent-state process
//!   tomography in the Choi representation, with a diluted fixed-point
//!   iteration, plus the comparison metrics (Choi fidelity, parameter
//!   scans, random-state output fidelity).
//! - [`cli`] — pipeline orchestration behind the `fsf` binary.

pub mod cli;
pub mod fock;
pub mod homodyne;
mod linalg;
mod math;
pub mod model;
pub mod tomography;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("coherent amplitude too large for truncation: norm deficit {deficit:.3e} >= {limit:.2e}")]
    TruncationDeficit { deficit: f64, limit: f64 },
    #[error("state is not normalized (trace {trace})")]
    NotNormalized { trace: f64 },
    #[error("matrix is not Hermitian (max deviation {max_dev:.3e})")]
    NotHermitian { max_dev: f64 },
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:.3e})")]
    NotPositive { min_eig: f64 },
    #[error("zero-probability event: {0}")]
    ZeroProbability(String),
    #[error("herald starvation: success probability {p:.3e} below floor {floor:.0e}")]
    HeraldStarvation { p: f64, floor: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("data integrity: {0}")]
    DataIntegrity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
