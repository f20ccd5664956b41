//! Bayesian neural networks trained by deterministic moment propagation, and
//! uncertainty-guided continual learning on top of them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod continual;
pub mod data;
pub mod elbo;
pub mod error;
pub mod grad;
pub mod metrics;
pub mod model;
pub mod moments;
pub mod prune;
pub mod report;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use continual::{CLConfig, ImportanceMetric, ImportanceVector, Method};
pub use data::{LabeledDataset, TaskSequence};
pub use elbo::{KLWeights, KlMode, PriorStore};
pub use error::{Error, Result};
pub use metrics::ResultMatrix;
pub use model::{Architecture, MPModel};
pub use moments::{
    Activation, BatchNormState, BnMode, GaussianParameter, LayerSpec, MomentPair, PoolGeometry,
};
pub use prune::{CdfMetric, PruneCriterion, PruneCurve};
pub use tensor::{matmul, ConvGeometry, SeededRng, Tensor};
pub use train::{LearningRates, TrainConfig};
