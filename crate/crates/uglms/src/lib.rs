//! Uncertainty-guided live measurement sequencing for SAR ADC linearity
//! testing.
//!
//! This crate estimates the static linearity (DNL and INL) of a successive
//! approximation ADC by probing a small number of adaptively chosen code
//! edges instead of sampling the whole transfer curve. A behavioral
//! mismatch model of the converter is refined online by an extended Kalman
//! filter; each iteration probes the code edge with the highest expected
//! information gain using a localized voltage sweep, and the final mismatch
//! estimate reconstructs every code edge in closed form.
//!
//! Module map:
//!
//! * [`adc`]: the simulated converter, mismatch sampling, ground-truth edges.
//! * [`stimulus`]: high-resolution DAC sweeps producing scalar residuals.
//! * [`estimator`]: the Kalman loop, gain-based code selection, covariance
//!   inflation, adaptive termination.
//! * [`metrics`]: DNL/INL reconstruction, endpoint correction, comparisons,
//!   and the ramp histogram baseline.
//! * [`harness`]: experiment configurations, the CLI entry points, and
//!   plot-ready data export.
//!
//! The narrative guide under `book/` walks through the same concepts; its
//! code snippets compile and run as doctests below, keeping book and crate
//! in sync.

pub mod adc;
pub mod estimator;
pub mod harness;
pub mod metrics;
pub mod rng;
pub mod stimulus;

use thiserror::Error as ThisError;

/// Crate-wide error type.
#[derive(Debug, ThisError)]
pub enum Error {
    #[error("invalid device spec: {0}")]
    InvalidSpec(String),
    #[error("code {code} out of range for a {bits}-bit device")]
    CodeOutOfRange { code: u64, bits: u32 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite measurement rejected at iteration {iteration}")]
    NonFiniteMeasurement { iteration: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: configuration and I/O problems exit
    /// with 2, everything else with 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::Io(_) => 2,
            _ => 1,
        }
    }
}

#[cfg(doctest)]
mod book {
    //! Doctest bindings for the guide chapters.
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(linearity, "../../../book/src/linearity.md");
    chapter!(sar_model, "../../../book/src/sar-model.md");
    chapter!(sweeps, "../../../book/src/sweeps.md");
    chapter!(estimator, "../../../book/src/estimator.md");
    chapter!(experiments, "../../../book/src/experiments.md");
}
