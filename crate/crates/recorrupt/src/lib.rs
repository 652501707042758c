//! Self-supervised image denoising losses and their statistical validators.
//!
//! The crate provides:
//! - a dense `f64` tensor type with a reverse-mode differentiation graph
//!   ([`tensor`], [`autodiff`]) sized for small convolutional denoisers,
//! - seedable counter-based random variate generation ([`samplers`]),
//! - forward corruption models and their exponential-family structure
//!   ([`noise`]),
//! - recorruption pair construction and losses for every supported noise
//!   family, plus Monte Carlo checkers for the identities they rely on
//!   ([`splitting`]),
//! - SURE / UNSURE divergence-based objectives ([`sure`]),
//! - the learned monotone recorruptor and its min-max training objective
//!   ([`recorruptor`], [`l2r`]),
//! - optimizers, image metrics and the training/evaluation loops
//!   ([`optim`], [`metrics`], [`train`]),
//! - file formats and the command line surface ([`io`], [`cli`]).

pub mod autodiff;
pub mod cli;
pub mod denoiser;
pub mod io;
pub mod l2r;
pub mod metrics;
pub mod noise;
pub mod optim;
pub mod recorruptor;
pub mod samplers;
pub mod splitting;
pub mod sure;
pub mod tensor;
pub mod train;

use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A parameter or input lies outside its legal domain.
    Domain(String),
    /// Malformed file contents or configuration text.
    Parse(String),
    /// Inconsistent run configuration detected at startup.
    Config(String),
    /// A computation produced NaN or infinity where the contract forbids it.
    NonFinite(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "shape mismatch in {op}: {lhs:?} vs {rhs:?}")
            }
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
