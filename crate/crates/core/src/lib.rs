//! Semi-supervised heteroscedastic regression with two co-trained dropout
//! networks.
//!
//! Two small MLP regressors predict a target `ŷ` and a log aleatoric variance
//! `ẑ`. They are trained jointly on labeled rows with a Gaussian
//! heteroscedastic loss plus a penalty keeping their variance predictions
//! consistent, and on unlabeled rows against pseudo-labels obtained by
//! averaging several Monte Carlo dropout draws of both models (variational
//! model ensembling). The same ensemble is used for inference.
//!
//! Modules, bottom up:
//!
//! - [`numeric`]: matrices and the seeded ChaCha8 generator
//! - [`model`]: the dropout MLP with exact backpropagation and checkpoints
//! - [`losses`]: loss terms and their output gradients
//! - [`vme`]: ensembled pseudo-labels, inference and the bias–variance check
//! - [`training`]: optimizers, the co-training step and experiment loop
//! - [`data`]: synthetic tasks, CSV, splitting and standardization
//! - [`evaluation`]: MAE, R², uncertainty bins, rank correlation
//! - [`experiment`]: config files and the train / ablate / variance workflows

pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod training;
pub mod vme;

pub use data::{RegressionDataset, SemiSupervisedSplit, SyntheticSpec};
pub use error::{Error, Result};
pub use losses::LossBreakdown;
pub use model::{MlpConfig, MlpModel};
pub use numeric::{Matrix, RngState};
pub use training::{TrainConfig, Variant};
pub use vme::PseudoLabelBatch;
