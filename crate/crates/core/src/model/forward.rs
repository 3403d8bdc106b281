use std::sync::Arc;

use crate::graphio::{build_adj, build_attention_structure, build_norm_adj, Graph};
use crate::numcore::{DenseMatrix, Rng, SparseAdj, Stream, Tape, Var};

use super::layers::{
    baseline_gat_layer, baseline_gcn_layer, env_probs, gumbel_sample, moe_gat_layer, moe_gcn_layer,
    BranchVars,
};
use super::{Backbone, Layout, Method, ModelConfig, ModelError, ModelParams};

/// Features plus whichever propagation structure the configuration needs.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub features: DenseMatrix,
    /// Normalized adjacency for GCN-style propagation.
    pub adj: Option<Arc<SparseAdj>>,
    /// Neighborhood-plus-self structure for attention.
    pub attention: Option<Arc<SparseAdj>>,
}

impl ModelInput {
    pub fn new(g: &Graph, cfg: &ModelConfig) -> Self {
        let (adj, attention) = match (cfg.method, cfg.backbone) {
            (Method::Canet, Backbone::Gcn) => (Some(build_norm_adj(g, cfg.canet_self_loops)), None),
            (Method::Erm, Backbone::Gcn) => (
                Some(build_adj(g, cfg.baseline_self_loops, cfg.baseline_norm)),
                None,
            ),
            (_, Backbone::Gat) => (None, Some(build_attention_structure(g))),
        };
        Self {
            features: g.features().clone(),
            adj: adj.map(Arc::new),
            attention: attention.map(Arc::new),
        }
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    fn adj(&self) -> Result<&Arc<SparseAdj>, ModelError> {
        self.adj
            .as_ref()
            .ok_or_else(|| ModelError::Config("GCN propagation needs a normalized adjacency".into()))
    }

    fn attention(&self) -> Result<&Arc<SparseAdj>, ModelError> {
        self.attention
            .as_ref()
            .ok_or_else(|| ModelError::Config("attention needs a neighborhood structure".into()))
    }
}

/// Randomness consumed by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardRng {
    /// `None` means zero Gumbel noise.
    pub gumbel: Option<Rng>,
    pub dropout: Rng,
}

impl ForwardRng {
    /// Fresh draws for training epoch `epoch` of the run seeded by `run`.
    pub fn training(run: &Rng, epoch: u64) -> Self {
        Self {
            gumbel: Some(run.fork(Stream::Gumbel).fork_salt(epoch)),
            dropout: run.fork(Stream::Dropout).fork_salt(epoch),
        }
    }

    /// Evaluation draws: a fixed stream so repeated evaluation agrees, or
    /// no noise at all under `deterministic_eval`.
    pub fn evaluation(run: &Rng, cfg: &ModelConfig) -> Self {
        Self {
            gumbel: (!cfg.deterministic_eval).then(|| run.fork(Stream::EvalGumbel)),
            dropout: run.fork(Stream::Dropout),
        }
    }
}

/// Per-layer estimator state of one forward pass.
#[derive(Clone, Debug)]
pub struct LayerPosterior {
    pub pi: Var,
    pub log_pi: Var,
    pub e: Var,
    pub gumbel: Option<DenseMatrix>,
}

#[derive(Clone, Debug, Default)]
pub struct EnvPosterior {
    pub layers: Vec<LayerPosterior>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Present for CaNet only.
    pub posterior: Option<EnvPosterior>,
}

/// Runs the model on `input`, recording everything on `tape`.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    input: &ModelInput,
    cfg: &ModelConfig,
    rng: &mut ForwardRng,
    training: bool,
) -> Result<ForwardOutput, ModelError> {
    if input.features.cols() != params.input_dim {
        return Err(ModelError::Incompatible(format!(
            "features have {} columns, model expects {}",
            input.features.cols(),
            params.input_dim
        )));
    }
    let store = &params.store;
    let x = tape.constant(input.features.clone())?;
    match &params.layout {
        Layout::Canet(layout) => {
            let phi_in = tape.param(store, layout.phi_in)?;
            let mut z = tape.matmul_t(x, phi_in)?;
            let n = input.n();
            let k = cfg.branches;
            let mut posterior = EnvPosterior::default();
            for (l, branch_ids) in layout.layers.iter().enumerate() {
                let layer = if cfg.mean_pool_env {
                    let uniform = DenseMatrix::filled(n, k, 1.0 / k as f64);
                    LayerPosterior {
                        pi: tape.constant(uniform.clone())?,
                        log_pi: tape.constant(uniform.map(f64::ln))?,
                        e: tape.constant(uniform)?,
                        gumbel: None,
                    }
                } else {
                    let w_env = tape.param(store, layout.env_for_layer(l))?;
                    let (pi, log_pi) = env_probs(tape, z, w_env)?;
                    let (e, gumbel) = gumbel_sample(
                        tape,
                        pi,
                        log_pi,
                        cfg.tau,
                        rng.gumbel.as_mut(),
                        cfg.gumbel_mode(),
                    )?;
                    LayerPosterior { pi, log_pi, e, gumbel }
                };
                let mut branches = Vec::with_capacity(branch_ids.len());
                for b in branch_ids {
                    let attn = match b.attn {
                        Some((w_a, bias)) => Some((tape.param(store, w_a)?, tape.param(store, bias)?)),
                        None => None,
                    };
                    branches.push(BranchVars {
                        w_d: tape.param(store, b.w_d)?,
                        w_self: tape.param(store, b.w_self)?,
                        attn,
                    });
                }
                z = match cfg.backbone {
                    Backbone::Gcn => moe_gcn_layer(
                        tape,
                        z,
                        input.adj()?,
                        layer.e,
                        &branches,
                        cfg.dropout,
                        &mut rng.dropout,
                        training,
                    )?,
                    Backbone::Gat => moe_gat_layer(
                        tape,
                        z,
                        input.attention()?,
                        layer.e,
                        &branches,
                        cfg.leaky_slope,
                        cfg.dropout,
                        &mut rng.dropout,
                        training,
                    )?,
                };
                posterior.layers.push(layer);
            }
            let phi_out = tape.param(store, layout.phi_out)?;
            let logits = tape.matmul_t(z, phi_out)?;
            Ok(ForwardOutput {
                logits,
                posterior: Some(posterior),
            })
        }
        Layout::Baseline(layout) => {
            let phi_in = tape.param(store, layout.phi_in)?;
            let mut z = tape.matmul_t(x, phi_in)?;
            for &(w, a) in &layout.layers {
                let w = tape.param(store, w)?;
                z = match (cfg.backbone, a) {
                    (Backbone::Gcn, _) => {
                        baseline_gcn_layer(tape, z, input.adj()?, w, cfg.dropout, &mut rng.dropout, training)?
                    }
                    (Backbone::Gat, Some(a)) => {
                        let a = tape.param(store, a)?;
                        baseline_gat_layer(
                            tape,
                            z,
                            input.attention()?,
                            w,
                            a,
                            cfg.leaky_slope,
                            cfg.dropout,
                            &mut rng.dropout,
                            training,
                        )?
                    }
                    (Backbone::Gat, None) => {
                        return Err(ModelError::Incompatible("GAT layer without attention vector".into()))
                    }
                };
            }
            let phi_out = tape.param(store, layout.phi_out)?;
            let logits = tape.matmul_t(z, phi_out)?;
            Ok(ForwardOutput {
                logits,
                posterior: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn small_graph(seed: u64) -> Graph {
        let mut rng = Rng::new(seed);
        let n = 12;
        let features = rng.gaussian_matrix(n, 5, 1.0);
        let labels = (0..n).map(|i| i % 3).collect();
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.bernoulli(0.3) {
                    edges.push((u, v));
                }
            }
        }
        Graph::new(features, labels, 3, edges).unwrap()
    }

    fn cfg(backbone: Backbone) -> ModelConfig {
        ModelConfig {
            backbone,
            hidden: 4,
            branches: 3,
            dropout: 0.2,
            ..Default::default()
        }
    }

    #[test]
    fn shapes_and_normalization() {
        let g = small_graph(1);
        for backbone in [Backbone::Gcn, Backbone::Gat] {
            let cfg = cfg(backbone);
            let params = init_params(&cfg, 5, 3, &Rng::new(2)).unwrap();
            let input = ModelInput::new(&g, &cfg);
            let mut tape = Tape::new();
            let mut rng = ForwardRng::training(&Rng::new(3), 0);
            let out = forward(&mut tape, &params, &input, &cfg, &mut rng, true).unwrap();
            assert_eq!(tape.value(out.logits).shape(), (12, 3));
            let post = out.posterior.unwrap();
            assert_eq!(post.layers.len(), 2);
            for layer in &post.layers {
                for v in [layer.pi, layer.e] {
                    let m = tape.value(v);
                    assert_eq!(m.shape(), (12, 3));
                    for i in 0..12 {
                        assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                        assert!(m.row(i).iter().all(|&p| p > 0.0 && p < 1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn evaluation_is_repeatable() {
        let g = small_graph(4);
        let cfg = cfg(Backbone::Gcn);
        let params = init_params(&cfg, 5, 3, &Rng::new(2)).unwrap();
        let input = ModelInput::new(&g, &cfg);
        let run = |_: ()| {
            let mut tape = Tape::new();
            let mut rng = ForwardRng::evaluation(&Rng::new(9), &cfg);
            let out = forward(&mut tape, &params, &input, &cfg, &mut rng, false).unwrap();
            tape.value(out.logits).clone()
        };
        assert_eq!(run(()), run(()));
    }

    #[test]
    fn mean_pool_matches_uniform_gates() {
        let g = small_graph(5);
        let mut cfg = cfg(Backbone::Gcn);
        cfg.mean_pool_env = true;
        cfg.dropout = 0.0;
        let params = init_params(&cfg, 5, 3, &Rng::new(2)).unwrap();
        let input = ModelInput::new(&g, &cfg);
        let mut tape = Tape::new();
        let mut rng = ForwardRng::training(&Rng::new(3), 0);
        let out = forward(&mut tape, &params, &input, &cfg, &mut rng, true).unwrap();

        // Same computation spelled out with e ≡ 1/K.
        let Layout::Canet(layout) = &params.layout else { panic!() };
        let s = &params.store;
        let adj = input.adj.clone().unwrap();
        let mut t2 = Tape::new();
        let x = t2.constant(g.features().clone()).unwrap();
        let phi_in = t2.param(s, layout.phi_in).unwrap();
        let mut z = t2.matmul_t(x, phi_in).unwrap();
        let e = t2.constant(DenseMatrix::filled(12, 3, 1.0 / 3.0)).unwrap();
        for ids in &layout.layers {
            let b: Vec<BranchVars> = ids
                .iter()
                .map(|b| BranchVars {
                    w_d: t2.param(s, b.w_d).unwrap(),
                    w_self: t2.param(s, b.w_self).unwrap(),
                    attn: None,
                })
                .collect();
            z = moe_gcn_layer(&mut t2, z, &adj, e, &b, 0.0, &mut Rng::new(0), true).unwrap();
        }
        let phi_out = t2.param(s, layout.phi_out).unwrap();
        let logits = t2.matmul_t(z, phi_out).unwrap();
        assert!(tape.value(out.logits).max_abs_diff(t2.value(logits)) < 1e-14);
    }

    #[test]
    fn baseline_has_no_posterior() {
        let g = small_graph(6);
        for backbone in [Backbone::Gcn, Backbone::Gat] {
            let cfg = ModelConfig {
                method: Method::Erm,
                ..cfg(backbone)
            };
            let params = init_params(&cfg, 5, 3, &Rng::new(2)).unwrap();
            let input = ModelInput::new(&g, &cfg);
            let mut tape = Tape::new();
            let mut rng = ForwardRng::training(&Rng::new(3), 0);
            let out = forward(&mut tape, &params, &input, &cfg, &mut rng, true).unwrap();
            assert!(out.posterior.is_none());
            assert_eq!(tape.value(out.logits).shape(), (12, 3));
        }
    }

    #[test]
    fn edge_touches_are_layers_times_branches_times_entries() {
        let g = small_graph(7);
        let cfg = ModelConfig {
            layers: 3,
            branches: 4,
            ..cfg(Backbone::Gcn)
        };
        let params = init_params(&cfg, 5, 3, &Rng::new(2)).unwrap();
        let input = ModelInput::new(&g, &cfg);
        let mut tape = Tape::new();
        let mut rng = ForwardRng::training(&Rng::new(3), 0);
        forward(&mut tape, &params, &input, &cfg, &mut rng, true).unwrap();
        let nnz = input.adj.as_ref().unwrap().nnz() as u64;
        assert_eq!(tape.edge_touches(), 3 * 4 * nnz);
    }

    #[test]
    fn feature_width_checked() {
        let g = small_graph(8);
        let cfg = cfg(Backbone::Gcn);
        let params = init_params(&cfg, 6, 3, &Rng::new(2)).unwrap();
        let input = ModelInput::new(&g, &cfg);
        let mut tape = Tape::new();
        let mut rng = ForwardRng::training(&Rng::new(3), 0);
        assert!(matches!(
            forward(&mut tape, &params, &input, &cfg, &mut rng, true),
            Err(ModelError::Incompatible(_))
        ));
    }
}
