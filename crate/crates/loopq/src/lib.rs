//! Desk-scale laboratory for post-training quantization of looped
//! (weight-shared) transformers.
//!
//! A looped model applies one shared stack of layers T times, so a single
//! quantizer configuration has to serve T different activation distributions.
//! This crate builds small models where that tension is visible, quantizes
//! them with static baselines and loop-aware methods, calibrates against the
//! full-precision loop trajectory, and checks the resulting error recursion
//! numerically.
//!
//! Everything runs on plain `f64` matrices with a small reverse-mode autodiff
//! tape; no GPU, no external tensor runtime. All randomness flows through
//! explicitly seeded generators, and repeated runs with the same config are
//! bit-identical.
//!
//! Module map:
//! - [`tensor`]: dense row-major matrices plus the few decompositions needed.
//! - [`autodiff`]: define-by-run tape with straight-through rounding.
//! - [`looplm`]: the looped transformer, pretraining, trajectory capture.
//! - [`quant`]: group quantizers, invertible pre-quantization transforms.
//! - [`methods`]: baselines, per-loop scales, selective loop-dependent
//!   transforms, lightweight transition adapters.
//! - [`calibrate`]: trajectory-matching distillation of quantizer parameters.
//! - [`analysis`]: error trajectories, contraction factors, drift statistics,
//!   and the two error-propagation checks.
//! - [`data`]: seeded synthetic token streams.
//! - [`io`]: configs, checkpoints, reports, CSV emission.
//! - [`cli`]: subcommand plumbing for the `loopq` binary.

pub mod analysis;
pub mod autodiff;
pub mod calibrate;
pub mod cli;
pub mod data;
pub mod io;
pub mod looplm;
pub mod methods;
pub mod optim;
pub mod quant;
pub mod tensor;

/// Unified error type. The CLI maps [`Error::Config`] to exit code 2 and
/// [`Error::Verification`] to exit code 3; everything else is exit code 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape mismatch between tensors.
    #[error("dimension error: {0}")]
    Dim(String),

    /// An API precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A parameter value is out of its legal range.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// NaN/Inf or an ill-conditioned matrix where a usable one was required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A run configuration is inconsistent or unsupported.
    #[error("config error: {0}")]
    Config(String),

    /// A numerical verification check did not hold.
    #[error("verification failed: {0}")]
    Verification(String),

    /// Malformed file content (bad magic, truncated payload, wrong version).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
