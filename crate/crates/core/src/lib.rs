//! Variational Pólya tree (VPT) density estimation.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: a small reverse-mode tape over dense `f64` arrays, plus the
//!   special functions (log-gamma, digamma) the rest of the crate needs.
//! - [`distributions`]: Beta, diagonal Gaussian and logistic densities, sampling
//!   and closed-form KL divergences.
//! - [`polya_tree`]: the truncated Pólya tree prior with learnable Beta nodes.
//! - [`flow`]: an additive-coupling normalizing flow mapping data into `(0,1]^D`.
//! - [`baselines`]: fixed Gaussian/logistic priors and a learnable histogram.
//! - [`estimator`]: a flow paired with one base prior.
//! - [`data`], [`train`], [`metrics`], [`checkpoint`]: datasets, the training
//!   loop, evaluation metrics and model persistence.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod distributions;
pub mod error;
pub mod estimator;
pub mod flow;
pub mod metrics;
pub mod optim;
pub mod polya_tree;
pub mod train;

pub use autodiff::{Array, Gradients, Tape, Var};
pub use baselines::{FixedKind, FixedPrior, LearnableHistogram};
pub use checkpoint::Checkpoint;
pub use data::{Dataset, Split, Standardization, SynthKind};
pub use distributions::{BetaDist, DiagGaussian, LogisticDist};
pub use error::{Error, Result};
pub use estimator::{Base, DensityEstimator, PriorKind};
pub use flow::{Activation, FlowConfig, FlowModel};
pub use polya_tree::{LeafAssignment, PartitionMode, PolyaTreeModel, YMode};
pub use train::{train, EpochRecord, TrainConfig, TrainReport};
