//! Classical learners: CART trees, random forests with grid-search CV,
//! gradient boosting and logistic regression.

pub mod boosting;
pub mod forest;
pub mod logistic;
pub mod tree;

pub use boosting::{fit_gradient_boosting, BoostingConfig, GradientBoosting};
pub use forest::{fit_random_forest, grid_search_cv, paper_grid, ForestConfig, GridSearchResult, RandomForest};
pub use logistic::{fit_logistic_regression, LogisticModel};
pub use tree::{best_split, fit_decision_tree, fit_tree_indexed, impurity, ColumnIndex, Criterion, DecisionTree, TreeNode, TreeParams};
