//! Learning-consistency score prediction: CIFAR ingestion, a small reverse-mode
//! autodiff core, convolutional score predictors, the regression / binning /
//! pairwise-ranking objectives, a deterministic training driver and the
//! evaluation metrics used to judge predicted difficulty orderings.

pub mod autodiff;
pub mod data_io;
pub mod evaluation;
pub mod models;
pub mod objectives;
pub mod rng;
pub mod synthetic;
pub mod training;
