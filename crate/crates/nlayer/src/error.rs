//! Error taxonomy shared by all modules.

use thiserror::Error;

/// Failure modes of the numerical pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Exponent outside the admissible range for the requested operation.
    #[error("invalid exponent p = {p}: {reason}")]
    InvalidExponent { p: f64, reason: String },

    /// A truncated domain was too short for the requested tail tolerance.
    #[error("truncation too aggressive: {detail}; suggested half-width {suggested}")]
    Truncation { detail: String, suggested: f64 },

    /// Fredholm solvability condition violated.
    #[error("solvability condition violated: ∫ rhs·w_x = {inner_product:e} (tolerance {tolerance:e})")]
    Solvability { inner_product: f64, tolerance: f64 },

    /// Tail fit for the decay constant was too noisy.
    #[error("decay-constant fit too noisy: rms residual {rms:e} relative to fitted value")]
    DecayFit { rms: f64 },

    /// Eigenvalue computation failed or produced an inadmissible value.
    #[error("spectral failure: {0}")]
    Spectral(String),

    /// Invalid curve input (self-intersection, non-closure, ...).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// The tubular neighborhood of a curve leaves the domain of a field.
    #[error("tube error: {0}")]
    Tube(String),

    /// Matrix field failed the ellipticity check.
    #[error("ellipticity violated: {0}")]
    Ellipticity(String),

    /// An iteration failed to reach its tolerance.
    #[error("non-convergence: {detail} (last residual {residual:e})")]
    NonConvergence { detail: String, residual: f64 },

    /// Degenerate geometry: the zeroth Jacobi coefficient is not positive.
    #[error("degenerate geometry: min Υ₀ = {min_upsilon0:e} ≤ 0")]
    DegenerateGeometry { min_upsilon0: f64 },

    /// A resonance-gap condition failed.
    #[error("resonance: {0}")]
    Resonance(String),

    /// The layer separation constraint is violated.
    #[error("layer overlap: minimal separation {separation:e} below required {required:e}")]
    LayerOverlap { separation: f64, required: f64 },

    /// Configuration or input validation failure.
    #[error("validation error: {0}")]
    Validation(String),

    /// Generic numerical failure (singular system, NaN, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// I/O failure when writing artifacts.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
