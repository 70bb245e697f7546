//! Factor-augmented risk scenarios.
//!
//! The crate extracts global, overlapping and block-specific factors from a
//! blocked panel, measures their sampling uncertainty with a cross-sectional
//! subsampling correction, builds confidence-ellipsoid stress scenarios, fits
//! factor-augmented quantile regressions, and smooths the resulting quantile
//! forecasts into skew-t predictive densities from which growth-at-risk style
//! tail quantiles are read off.
//!
//! Each stage is a module; [`pipeline`] chains them and persists every
//! intermediate artifact. The `examples/` directory has one runnable program
//! per stage.

pub mod data;
pub mod error;
pub mod factors;
pub mod faqr;
pub mod io;
pub mod linalg;
pub mod pipeline;
pub mod report;
pub mod skewt;
pub mod synthetic;
pub mod uncertainty;

#[cfg(test)]
mod testutil;

pub use data::{build_pattern, load_panel, standardize, BlockSpec, FactorStructure, LoadingPattern, Node, Panel};
pub use error::{FarsError, Result};
pub use factors::{estimate_mldfm, pc_estimate, FactorEstimate, InitMethod, MldfmResult};
pub use faqr::{compute_fars, fit_quantile_regression, Direction, FarsResult, QuantileFit};
pub use skewt::{compute_density, fit_skewt, quantile_risk, DensityResult, SkewTParams};
pub use uncertainty::{create_scenario, subsample_estimates, GammaMode, Scenario};
