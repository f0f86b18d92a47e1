//! Simulation laboratory for the bias of factor score determinacy
//! coefficients under categorical observed variables.
//!
//! The crate generates factor-model data with known factor scores, fits
//! confirmatory factor models by maximum likelihood, by diagonally weighted
//! least squares on polychoric correlations, and by Gibbs-sampled Bayesian
//! estimation, and compares parameter-based determinacy coefficients with
//! the correlations between factor score predictors and the true scores.

pub mod bayes;
pub mod categorical;
pub mod datagen;
pub mod error;
pub mod fit;
pub mod linalg;
pub mod ml;
pub mod model;
pub mod normal;
pub mod optim;
pub mod report;
pub mod rng;
pub mod scoring;
pub mod simulation;

pub use error::{Error, Result};
pub use ml::{EstimationResult, Method, ModelSpec};
pub use model::{build_population_pattern, implied_covariance, FactorModelParams, PopulationDescriptor};
pub use report::{ResultRow, Target, VerifyReport};
pub use simulation::{CellSummary, ConditionSpec, Estimator, EstimatorSet, GridConfig, GridResult};
