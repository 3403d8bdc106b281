//! CaNet predictor and plain GNN baselines.
//!
//! A CaNet forward pass is
//!
//! ```text
//! z¹ = x·φ_inᵀ
//! for l in 1..=L:
//!     π^l = softmax(z^l · W_envᵀ)                       (per node, K entries)
//!     e^l = softmax((π^l + g) / τ),  g ~ Gumbel(0, 1)
//!     z^{l+1} = z^l + dropout(ReLU(Σ_k e^l_k · [Â z^l W_Dᵏᵀ + z^l W_selfᵏᵀ]))
//! logits = z^{L+1} · φ_outᵀ
//! ```
//!
//! The GAT variant replaces `Â` with per-branch neighborhood attention.
//! Baselines share the φ_in/φ_out scaffold with a single propagation unit
//! per layer.

mod export;
mod forward;
mod layers;
mod params;

use serde::{Deserialize, Serialize};

use crate::graphio::Normalization;
use crate::numcore::NumError;

pub use export::{export_branch_weights, import_matrix_csv};
pub use forward::{forward, EnvPosterior, ForwardOutput, ForwardRng, LayerPosterior, ModelInput};
pub use layers::{
    baseline_gat_layer, baseline_gcn_layer, env_probs, finish_layer, gumbel_sample, moe_gat_layer,
    moe_gat_preactivation, moe_gcn_layer, moe_gcn_preactivation, BranchVars, GumbelMode,
};
pub use params::{init_params, BaselineLayout, BranchIds, CanetLayout, Layout, ModelParams};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("incompatible parameters: {0}")]
    Incompatible(String),
    #[error("layer {layer} outside [1, {layers}]")]
    LayerIndex { layer: usize, layers: usize },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Canet,
    Erm,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    #[default]
    Gcn,
    Gat,
}

/// Architecture and forward-pass switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub method: Method,
    pub backbone: Backbone,
    /// Number of propagation layers `L`.
    pub layers: usize,
    /// Hidden width `H`.
    pub hidden: usize,
    /// Number of branches / pseudo environments `K`.
    pub branches: usize,
    /// Gumbel-Softmax temperature `τ`.
    pub tau: f64,
    pub dropout: f64,
    /// One estimator matrix shared by all layers.
    pub shared_env: bool,
    /// Replace the estimator by uniform gates `e = 1/K`.
    pub mean_pool_env: bool,
    /// Perturb `log π` instead of `π` before the tempered softmax.
    pub log_prob_gumbel: bool,
    /// At evaluation use zero noise: `e = softmax(π/τ)`.
    pub deterministic_eval: bool,
    /// Self-loops in CaNet-GCN's normalized adjacency.
    pub canet_self_loops: bool,
    /// Self-loops in the baseline GCN's adjacency.
    pub baseline_self_loops: bool,
    pub baseline_norm: Normalization,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            method: Method::Canet,
            backbone: Backbone::Gcn,
            layers: 2,
            hidden: 32,
            branches: 3,
            tau: 1.0,
            dropout: 0.0,
            shared_env: false,
            mean_pool_env: false,
            log_prob_gumbel: false,
            deterministic_eval: false,
            canet_self_loops: false,
            baseline_self_loops: true,
            baseline_norm: Normalization::Symmetric,
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.layers == 0 {
            return bad("at least one propagation layer is required".into());
        }
        if self.hidden == 0 {
            return bad("hidden width must be positive".into());
        }
        if self.method == Method::Canet && self.branches == 0 {
            return bad("at least one branch is required".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return bad(format!("leaky slope {} outside [0, 1)", self.leaky_slope));
        }
        Ok(())
    }

    pub fn gumbel_mode(&self) -> GumbelMode {
        if self.log_prob_gumbel {
            GumbelMode::LogProb
        } else {
            GumbelMode::Literal
        }
    }
}
