//! Regression tree ensembles: bagged trees, extremely randomized trees, and
//! depth-wise / leaf-wise gradient boosting, sharing one tree representation.

pub mod ensemble;
pub mod tree;
pub mod tune;

pub use ensemble::{fit, Combination, LearnerKind, LearnerSpec, ModelDocument, TreeEnsemble};
pub use tree::{fit_cart, FeatureSubset, Tree, TreeNode};
pub use tune::{tune, SearchSpace, TuneResult};
