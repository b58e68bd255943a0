//! Task-aware pruning for small feed-forward language models.
//!
//! The pipeline runs two calibration corpora (general and task) through a
//! model, reduces the captured layer inputs to per-channel squared-norm
//! sums, scores every weight as `A_j * W_ij^2`, splits input channels into
//! shared / general-only / task-only groups by the difference of their
//! activation norms, fuses the per-source scores group by group and finally
//! turns the fused scores into an unstructured or N:M mask.
//!
//! ```no_run
//! use taskprune::prelude::*;
//! # fn run(model: &Model, general: &TokenCorpus, task: &TokenCorpus) -> taskprune::Result<()> {
//! let g = collect_norms(model, general)?;
//! let t = collect_norms(model, task)?;
//! let cfg = TaskAwareConfig::default().with_alpha(0.2);
//! let fused = task_aware_scores(model, &g, &t, &cfg)?;
//! let mask = make_mask(&fused.scores, &SparsitySpec::unstructured(0.5, Scope::Layer)?)?;
//! let pruned = apply_mask(model, &mask)?;
//! # let _ = pruned; Ok(()) }
//! ```

pub mod calibration;
pub mod error;
pub mod evaluation;
pub mod format;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod scoring;
pub mod seed;
pub mod synthetic;
pub mod taskaware;
pub mod train;

pub use error::{Error, Result};

pub mod prelude {
    pub use crate::calibration::{
        balance_by_tokens, collect_norms, sample_corpus, ActivationNorms, Balance, LayerNorms, SourceTag, TokenCorpus,
    };
    pub use crate::evaluation::{
        calibration_samples, compare_methods, compare_on, exact_delta_loss_oracle, lm_metrics, perplexity,
        CompareOptions, EvalReport, LmMetrics, Splits,
    };
    pub use crate::masking::{make_mask, sparsity_report, PruneMask, Scope, SparsitySpec};
    pub use crate::model::{apply_mask, forward, Model, ModelSpec, Nonlinearity};
    pub use crate::numerics::Matrix;
    pub use crate::scoring::{wanda_scores, Provenance, ScoreTensor};
    pub use crate::synthetic::{generate_task_pair, SyntheticTaskPair};
    pub use crate::taskaware::{
        delta_scores, fuse_scores, partition_channels, task_aware_scores, AlphaScale, ChannelGroup, ChannelPartition,
        DeltaScores, NormMode, TaskAwareConfig,
    };
    pub use crate::train::{train_toy_model, TrainConfig};
    pub use crate::{Error, Result};
}
