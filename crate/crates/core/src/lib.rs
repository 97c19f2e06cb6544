//! Filter-pruning toolkit for small convolutional networks.
//!
//! * [`tensor`]: dense `f32` weights and channel-removal primitives.
//! * [`format`]: the PKM model manifest, PKMT tensor blobs and datasets.
//! * [`ranking`]: l1/l2 norms plus the sign-split D-Score, D-Step and
//!   D-Step GM filter rankings.
//! * [`inference`]: a deterministic forward pass and accuracy evaluation.
//! * [`sensitivity`]: per-layer pruning sweeps and threshold extraction.
//! * [`pruner`]: pruning plans, graph surgery and Params/FLOPs reports.
//! * [`cli`]: the `prunekit` command-line frontend.

pub mod cli;
pub mod format;
pub mod inference;
pub mod pruner;
pub mod ranking;
pub mod sensitivity;
pub mod tensor;

use thiserror::Error;

pub use format::{load_dataset, load_model, save_model, validate_graph, Dataset, ModelGraph};
pub use inference::{evaluate, forward};
pub use pruner::{
    apply_plan, build_plan, count_flops, count_params, reduction_report, PruningPlan,
    ReductionReport,
};
pub use ranking::{FilterRanking, Method};
pub use sensitivity::{full_sensitivity, ratios_for_threshold, sweep_layer, SensitivityMap};
pub use tensor::WeightTensor;

/// Any error the toolkit can surface, each with a stable machine code.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Format(#[from] format::FormatError),
    #[error(transparent)]
    Ranking(#[from] ranking::RankingError),
    #[error(transparent)]
    Inference(#[from] inference::InferenceError),
    #[error(transparent)]
    Sensitivity(#[from] sensitivity::SensitivityError),
    #[error(transparent)]
    Prune(#[from] pruner::PruneError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Tensor(e) => e.code(),
            Error::Format(e) => e.code(),
            Error::Ranking(e) => e.code(),
            Error::Inference(e) => e.code(),
            Error::Sensitivity(e) => e.code(),
            Error::Prune(e) => e.code(),
            Error::Io { .. } => "Io",
            Error::Usage(_) => "Usage",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
