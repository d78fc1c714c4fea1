//! Clusterwise sign-flip score tests for clustered linear models.
//!
//! This crate tests fixed effects in univariate and multivariate clustered
//! (mixed-model-style) linear regressions without fitting a random-effects
//! model. The score for the coefficient under test is decomposed into
//! independent clusterwise contributions, and the null distribution is
//! approximated by flipping the sign of each cluster's contribution — the
//! same Rademacher sign applied synchronously across all outcomes, which
//! preserves cross-outcome dependence. Working weight matrices (identity,
//! diagonal, moment-estimated random intercept, or user supplied) affect
//! power but not validity.
//!
//! The main entry points are:
//! - [`data::ClusteredDataset`] and [`ingest`] for building datasets,
//! - [`weights`] for working weight construction,
//! - [`score::cluster_scores`] for the clusterwise score decomposition,
//! - [`flips`] for sign-flip plans, flip-score matrices and p-values,
//! - [`combine`] for global combining and max-T multiplicity adjustment,
//! - [`report::run_clip_test`] tying the pipeline together,
//! - [`baselines`] for OLS / HC3 / cluster-sandwich comparators,
//! - [`sim`] for scenario generators and the Monte Carlo harness.

pub mod baselines;
pub mod combine;
pub mod data;
pub mod error;
pub mod flips;
pub mod ingest;
pub mod report;
pub mod score;
pub mod sim;
pub mod weights;

pub use data::{Alternative, ClusteredDataset, HypothesisSpec, LongRecord};
pub use error::{Error, Result};
pub use report::{run_clip_test, ClipOptions, TestReport};
