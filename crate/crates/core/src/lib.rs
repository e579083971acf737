//! Bootstrap test of `H₀: rank(Π₀) ≤ r` for the first-stage coefficient
//! matrix of a linear instrumental-variable regression.
//!
//! The statistic is `n` times the sum of the `k − r` smallest squared singular
//! values of the OLS estimate `Π̂`. Critical values come from a residual
//! bootstrap (wild, cluster or moving-block) of the first stage, projected on
//! the singular subspaces selected by a rank estimate. Two variants are
//! provided: the two-step test, whose rank estimate comes from sequential
//! Kleibergen–Paap rk tests, and the analytic test, which thresholds the
//! singular values of `Π̂`.

pub mod bootstrap;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod linalg;
pub mod rank;
pub mod regression;

pub use bootstrap::{BootstrapDraws, BootstrapScheme};
pub use dataset::{assemble, load_csv, Dataset, Roles, Schema, Table};
pub use engine::{
    run_allrank, run_analytic, run_test, run_two_step, AnalyticResult, KpVariance, RankResult,
    SampleScale, TestConfig, TestContext, TestReport, TwoStepResult,
};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use regression::{fit_first_stage, FirstStageFit};
