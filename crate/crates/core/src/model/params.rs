use crate::numcore::{DenseMatrix, ParamId, ParamStore, Rng, Stream};

use super::{Backbone, Method, ModelConfig, ModelError};

/// Parameter handles of one CaNet branch.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchIds {
    pub w_d: ParamId,
    pub w_self: ParamId,
    /// `(W_A, b)` for the attention variant.
    pub attn: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CanetLayout {
    pub phi_in: ParamId,
    /// `layers[l][k]`.
    pub layers: Vec<Vec<BranchIds>>,
    /// One estimator per layer, or a single shared one.
    pub env: Vec<ParamId>,
    pub phi_out: ParamId,
}

impl CanetLayout {
    pub fn env_for_layer(&self, l: usize) -> ParamId {
        self.env[l.min(self.env.len() - 1)]
    }

    /// Ids of the estimator parameters (the `φ` of the objective).
    pub fn estimator_ids(&self) -> &[ParamId] {
        &self.env
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineLayout {
    pub phi_in: ParamId,
    /// `(W, a)` per layer; `a` only for GAT.
    pub layers: Vec<(ParamId, Option<ParamId>)>,
    pub phi_out: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layout {
    Canet(CanetLayout),
    Baseline(BaselineLayout),
}

/// Trainable matrices plus the handles that give them structure.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub store: ParamStore,
    pub layout: Layout,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl ModelParams {
    /// Replaces every value by the equally named matrix of `other`, checking
    /// names and shapes.
    pub fn load_values(&mut self, named: &[(String, DenseMatrix)]) -> Result<(), ModelError> {
        if named.len() != self.store.len() {
            return Err(ModelError::Incompatible(format!(
                "{} stored matrices, model expects {}",
                named.len(),
                self.store.len()
            )));
        }
        for (name, value) in named {
            let id = self
                .store
                .find(name)
                .ok_or_else(|| ModelError::Incompatible(format!("unknown parameter {name}")))?;
            if self.store.get(id).shape() != value.shape() {
                return Err(ModelError::Incompatible(format!(
                    "{name}: stored shape {:?}, model expects {:?}",
                    value.shape(),
                    self.store.get(id).shape()
                )));
            }
            *self.store.get_mut(id) = value.clone();
        }
        Ok(())
    }

    pub fn named_values(&self) -> Vec<(String, DenseMatrix)> {
        self.store
            .iter()
            .map(|(_, n, m)| (n.to_string(), m.clone()))
            .collect()
    }
}

/// He-style Gaussian init, `std = √(2/fan_in)` with fan-in the number of
/// columns; attention vectors start at zero.
pub fn init_params(
    cfg: &ModelConfig,
    input_dim: usize,
    num_classes: usize,
    rng: &Rng,
) -> Result<ModelParams, ModelError> {
    cfg.validate()?;
    if input_dim == 0 || num_classes == 0 {
        return Err(ModelError::Config(format!(
            "input dim {input_dim} and class count {num_classes} must be positive"
        )));
    }
    let mut rng = rng.fork(Stream::Init);
    let h = cfg.hidden;
    let mut store = ParamStore::new();
    let mut gauss = |store: &mut ParamStore, name: String, rows: usize, cols: usize| {
        let std = (2.0 / cols as f64).sqrt();
        store.add(name, rng.gaussian_matrix(rows, cols, std))
    };
    let phi_in = gauss(&mut store, "phi_in".into(), h, input_dim);
    let gat = cfg.backbone == Backbone::Gat;
    let layout = match cfg.method {
        Method::Canet => {
            let mut layers = Vec::with_capacity(cfg.layers);
            for l in 0..cfg.layers {
                let mut branches = Vec::with_capacity(cfg.branches);
                for k in 0..cfg.branches {
                    let w_d = gauss(&mut store, format!("layer{l}.branch{k}.w_d"), h, h);
                    let w_self = gauss(&mut store, format!("layer{l}.branch{k}.w_self"), h, h);
                    let attn = gat.then(|| {
                        let w_a = gauss(&mut store, format!("layer{l}.branch{k}.w_a"), h, h);
                        let b = store.add(format!("layer{l}.branch{k}.b"), DenseMatrix::zeros(2 * h, 1));
                        (w_a, b)
                    });
                    branches.push(BranchIds { w_d, w_self, attn });
                }
                layers.push(branches);
            }
            let env = if cfg.shared_env {
                vec![gauss(&mut store, "env.shared".into(), cfg.branches, h)]
            } else {
                (0..cfg.layers)
                    .map(|l| gauss(&mut store, format!("env.layer{l}"), cfg.branches, h))
                    .collect()
            };
            let phi_out = gauss(&mut store, "phi_out".into(), num_classes, h);
            Layout::Canet(CanetLayout {
                phi_in,
                layers,
                env,
                phi_out,
            })
        }
        Method::Erm => {
            let layers = (0..cfg.layers)
                .map(|l| {
                    let w = gauss(&mut store, format!("layer{l}.w"), h, h);
                    let a = gat.then(|| store.add(format!("layer{l}.a"), DenseMatrix::zeros(2 * h, 1)));
                    (w, a)
                })
                .collect();
            let phi_out = gauss(&mut store, "phi_out".into(), num_classes, h);
            Layout::Baseline(BaselineLayout {
                phi_in,
                layers,
                phi_out,
            })
        }
    };
    Ok(ModelParams {
        store,
        layout,
        input_dim,
        num_classes,
    })
}
