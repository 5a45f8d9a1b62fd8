//! Soft-label contrastive regularisation for multi-label species encounter
//! rate prediction: losses, a small trainable model, data preparation,
//! metrics and the experiment harness built on top of them.

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod pairing;
pub mod search;

pub use error::{Error, Result};
pub use losses::{
    bce_loss, combined_loss, infonce_loss, pecl_loss, softmax_weights, supcon_loss, CombinedLoss,
    ContrastiveConfig, LossOutput,
};
pub use metrics::{fmse, mse, pearson, topk_accuracy, EvalSummary, FmseAxis, FmseReport, MetricReport};
pub use model::{
    fit, DataSplit, FitOutcome, MeanRateModel, ModelConfig, SpeciesModel, TrainConfig, TrainReport,
};
pub use numeric::{Matrix, SeededRng};
pub use pairing::{knn_neighbors, label_similarity_matrix, soft_labels, NeighborSet, SoftLabelSource};
