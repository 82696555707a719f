//! Predicting binary plant phenotypes from compositional microbiome count
//! tables and environmental covariates.
//!
//! The crate covers the whole modelling pipeline:
//!
//! * [`data`]: OTU tables, sample metadata, environmental tables, rare-OTU
//!   filtering and response binarization.
//! * [`preprocess`]: the 20 zero-replacement × normalization combinations
//!   (`NM1`..`NM20`) and the six environmental scalers.
//! * [`augment`]: variety- and label-stratified Gaussian augmentation of the
//!   training partition.
//! * [`netinfer`]: per-class association networks and degree-difference
//!   comparison.
//! * [`featsel`]: the seven ML selection criteria, TOTAL scoring and the
//!   combined 0–3 score.
//! * [`learners`]: decision trees, random forests with grid-search CV,
//!   gradient boosting and logistic regression.
//! * [`bnn`]: Bayesian multilayer perceptron sampled with Hamiltonian Monte
//!   Carlo and Gibbs hyperparameter updates.
//! * [`eval`]: splits, weighted F1, randomized baselines and the exceedance
//!   test.
//! * [`fms`]: the full-model-selection regression tree.
//! * [`harness`]: run configuration, synthetic data, grid runner and CLI.

pub mod augment;
pub mod bnn;
pub mod data;
pub mod error;
pub mod eval;
pub mod featsel;
pub mod fms;
pub mod harness;
pub mod learners;
pub mod netinfer;
pub mod preprocess;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};

pub mod prelude {
    pub use crate::augment::{augment_training, AugmentSpec, Augmented};
    pub use crate::data::{
        binarize_disease, binarize_yield, filter_rare_otus, load_env_table, load_metadata,
        load_otu_table, BinaryLabels, EnvGroup, EnvTable, OtuTable, Response, SampleMetadata,
        TaxonomicLevel,
    };
    pub use crate::error::{Error, Result};
    pub use crate::eval::{weighted_f1, BaselineStrategy, Metrics, SplitPlan};
    pub use crate::learners::{ForestConfig, RandomForest};
    pub use crate::preprocess::{
        apply_spec, normalize, preprocess_grid, replace_zeros, scale_env, EnvScaler,
        Normalization, PreprocessSpec, ZeroReplacement,
    };
}
