//! Error types shared across the solver pipeline.

use alloc::string::String;
use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

/// Errors produced by validation, the Riccati solvers, gain synthesis,
/// and the Monte-Carlo drivers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A matrix shape is inconsistent with the declared dimensions.
    #[error("dimension mismatch for {what}: expected {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    DimensionMismatch {
        what: String,
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },

    /// The chain generator has a negative off-diagonal rate or a row that
    /// does not sum to zero.
    #[error("invalid generator: {detail}")]
    GeneratorInvalid { detail: String },

    /// A cost weight violates standing assumption (A1) or (A2).
    #[error("assumption {assumption} violated by {matrix} in regime {regime}: {detail}")]
    AssumptionViolated {
        assumption: &'static str,
        matrix: &'static str,
        regime: usize,
        detail: String,
    },

    /// Unknown built-in example name.
    #[error("unknown example `{name}`")]
    UnknownExample { name: String },

    /// Query time outside `[0, T]`.
    #[error("time {t} outside horizon [0, {horizon}]")]
    OutOfRange { t: f64, horizon: f64 },

    /// A gain-defining matrix (N1-tilde or N2-tilde) lost positive
    /// definiteness.
    #[error("{which} singular at t={t}, regime {regime}: min eigenvalue {min_eig:.3e}")]
    GainSingular {
        which: &'static str,
        t: f64,
        regime: usize,
        min_eig: f64,
    },

    /// The operator `I - P2*D1` became numerically singular; the paper
    /// leaves its invertibility open, so this is reported rather than
    /// regularized.
    #[error("{what} singular at t={t}, regime {regime}: rcond {rcond:.3e}")]
    MatrixSingular {
        what: &'static str,
        t: f64,
        regime: usize,
        rcond: f64,
    },

    /// Non-finite values appeared during integration.
    #[error("integration unstable at t={t}, regime {regime}: {detail}")]
    StepUnstable {
        t: f64,
        regime: usize,
        detail: String,
    },

    /// Simulation configuration is inconsistent (grid mismatch, empty
    /// direction vector, bad sample counts).
    #[error("invalid simulation config: {detail}")]
    ConfigInvalid { detail: String },

    /// Cost estimation was asked for an empty ensemble.
    #[error("ensemble contains no samples")]
    EmptyEnsemble,
}
