//! Estimation for multivariate data missing non-monotonically and
//! not-at-random under the no-self-censoring (NSC) assumption.
//!
//! The crate is organized around an odds-ratio parameterization of the
//! missingness mechanism: per-variable log-odds-ratio functions induce
//! pattern probabilities via the Chen factorization, pattern-mixture
//! regressions are fit as odds-ratio-weighted complete-case regressions,
//! and the target functional is estimated by augmented inverse
//! probability weighting (AIPW) with a stacked-equation sandwich
//! variance and percentile bootstrap.
//!
//! Small binary systems come with an exhaustive-enumeration oracle
//! ([`oracle`]) that verifies identification, influence-function, and
//! double-robustness claims by direct expectation. [`simgen`] reproduces
//! the conditional-Gaussian and binary data-generating processes used in
//! the simulation studies.

pub mod error;
pub mod estimator;
pub mod fit;
pub mod odds;
pub mod oracle;
pub mod patterns;
pub mod simgen;

pub use error::{Error, Result};
pub use estimator::{
    bootstrap_ci, estimate_aipw, estimate_ipw, estimate_joint_binary, sandwich_se, AipwFit,
    EstimateConfig, EstimateReport, TargetFunctional,
};
pub use fit::{OrFitMethod, PmForm};
pub use odds::{BasisSpec, Factor, LinearFunction, OddsRatioSpec, SelectionModel};
pub use patterns::{Dataset, PatternId, Record, SupportTable};
