//! Causal effect estimation on spatial grid data.
//!
//! The crate covers the full path from raw inputs to reports:
//!
//! * [`data_pipeline`]: uniform grid, crash counts, tract reallocation, image
//!   features.
//! * [`screening`]: Spearman and importance based covariate selection,
//!   z-scoring.
//! * [`learners`]: four tree-ensemble regressors used as nuisance models.
//! * [`dml`]: cross-fitted partially linear estimation, robustness screen,
//!   OLS baseline.
//! * [`shap`]: exact tree Shapley values, interactions, LOWESS dependence
//!   curves.
//! * [`causal_forest`]: honest causal forest with little-bags variance.
//! * [`heterogeneity`]: quartile subgroups, semi-elasticity, subtype forests,
//!   CATE maps.
//! * [`synthetic`]: data generating processes with known truth and estimator
//!   scoring.
//! * [`pipeline`]: configuration and the staged batch driver.

pub mod causal_forest;
pub mod data_pipeline;
pub mod dml;
pub mod error;
pub mod heterogeneity;
pub mod learners;
pub mod pipeline;
pub mod rng;
pub mod screening;
pub mod shap;
pub mod stats;
pub mod synthetic;
pub mod table;

pub use error::{Error, Result};
