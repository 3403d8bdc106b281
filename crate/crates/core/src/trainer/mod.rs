//! Training objective, the full-batch training loop, checkpoints and
//! hyperparameter sweeps.
//!
//! The CaNet objective on the training nodes is
//!
//! ```text
//! CE(logits, y) + (λ/L) Σ_l mean_v Σ_k e_vk (log π_vk + log K)
//! ```
//!
//! where the second term is a one-sample Monte-Carlo estimate of the KL
//! divergence from the estimator's categorical to the uniform prior. The
//! exact form `Σ_k π_vk log π_vk + log K` is available as an alternative.

mod checkpoint;
mod gradcheck;
mod loss;
mod sweep;
mod train;

use serde::{Deserialize, Serialize};

use crate::graphio::GraphError;
use crate::metrics::{EvalError, MetricError};
use crate::model::{Method, ModelConfig, ModelError};
use crate::numcore::NumError;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};
pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport, GroupError, GRADCHECK_FLOOR};
pub use loss::{kl_exact, kl_exact_term, mc_term, reg_term_mc, total_loss, LossTerms};
pub use sweep::{sweep, SweepGrid, SweepResult, SweepRun};
pub use train::{evaluate_splits, train, EpochRecord, RunRecord, SplitScores, TrainResult};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite value at epoch {epoch}: {detail}")]
    NonFinite { epoch: usize, detail: String },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: std::path::PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl From<NumError> for TrainError {
    fn from(e: NumError) -> Self {
        TrainError::Model(ModelError::Num(e))
    }
}

/// Which estimate of the KL regularizer enters the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    /// `Σ_k e_k (log π_k + log K)` with the sampled gates `e`.
    #[default]
    MonteCarlo,
    /// `Σ_k π_k log π_k + log K`.
    ExactKl,
}

pub const DEFAULT_SEED: u64 = 0;

/// Every hyperparameter of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    /// Weight `λ` of the regularizer.
    pub lambda: f64,
    pub lr: f64,
    /// Separate learning rate for the estimator weights; `None` shares `lr`.
    pub lr_env: Option<f64>,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub no_reg_loss: bool,
    pub regularizer: Regularizer,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lambda: 1.0,
            lr: 0.01,
            lr_env: None,
            weight_decay: 5e-4,
            epochs: 500,
            seed: DEFAULT_SEED,
            no_reg_loss: false,
            regularizer: Regularizer::MonteCarlo,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a finite non-negative number, got {}", self.lambda));
        }
        for (name, lr) in [("lr", Some(self.lr)), ("lr_env", self.lr_env)] {
            if let Some(lr) = lr {
                if !(lr > 0.0 && lr.is_finite()) {
                    return bad(format!("{name} must be positive, got {lr}"));
                }
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        Ok(())
    }

    /// Whether the regularizer contributes to the loss at all.
    pub fn uses_regularizer(&self) -> bool {
        self.model.method == Method::Canet && !self.no_reg_loss && !self.model.mean_pool_env && self.lambda > 0.0
    }
}
