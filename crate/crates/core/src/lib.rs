//! Sparse regression with estimated latent factors.
//!
//! High-dimensional responses often carry dense effects that no sparse
//! coefficient vector can absorb. This crate models them through latent
//! variables: leading principal component scores of an observed covariate
//! block are estimated, appended to the design, and a penalized least
//! squares fit selects predictors and factors jointly. The pieces are
//! usable on their own:
//!
//! * [`pca`] — sample covariance, symmetric eigendecomposition, factor
//!   score vectors, and convergence-angle diagnostics for spiked spectra.
//! * [`penalty`] — hard-thresholding, L0, L1, SCAD, and elastic-net
//!   penalties with their closed-form coordinate updates.
//! * [`regression`] — coordinate-descent paths with warm starts and
//!   multi-starts, validation tuning, and an exhaustive small-problem
//!   oracle.
//! * [`pipeline`] — the end-to-end fit: factor estimation, design
//!   augmentation, tuning, prediction, and identifiability diagnostics.
//! * [`sim`] — seeded data generators and a replicated study harness with
//!   selection/estimation/prediction measures.

pub mod error;
pub mod pca;
pub mod penalty;
pub mod pipeline;
pub mod regression;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
pub use pca::{
    eigendecompose, principal_scores, rate_bound, sample_covariance, score_angle, subspace_angle,
    top_factor_basis, CovariateMatrix, EigenSystem, FactorBasis, ScoreSet, SpikedStructure,
};
pub use penalty::{PenaltyFamily, PenaltySpec};
pub use pipeline::{NslConfig, NslFit};
pub use regression::{
    brute_force_l0, default_grid, estimate_sigma, fit_path, lambda_max, objective, tune,
    AugmentedDesign, CoefficientEstimate, FitOptions,
};
pub use sim::{ExampleSpec, MeasureSummary, TruthSet};
