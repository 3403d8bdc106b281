use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::graphio::Graph;
use crate::model::{forward, init_params, Backbone, ForwardRng, ModelConfig, ModelInput, ModelParams};
use crate::numcore::{finite_diff_grad, relative_error, GradFault, Grads, ParamStore, Rng, Stream, Tape};

use super::loss::total_loss;
use super::{TrainConfig, TrainError};

/// Gradient magnitudes below this are treated as this when normalizing.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// The small random instance the checker differentiates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub backbone: Backbone,
    pub branches: usize,
    pub layers: usize,
    pub seed: u64,
    pub nodes: usize,
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub dropout: f64,
    pub step: f64,
    pub tolerance: f64,
    #[serde(skip)]
    pub fault: Option<GradFault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Gcn,
            branches: 3,
            layers: 2,
            seed: 0,
            nodes: 12,
            input_dim: 5,
            hidden: 4,
            classes: 3,
            dropout: 0.2,
            step: 1e-5,
            tolerance: 1e-4,
            fault: None,
        }
    }
}

/// Worst discrepancy within one kind of parameter (`w_d`, `env`, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group: String,
    pub matrices: usize,
    pub scalars: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub groups: Vec<GroupError>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// `layer1.branch2.w_d` → `w_d`, `env.layer0` → `env`.
fn group_of(name: &str) -> &str {
    if name.starts_with("env.") {
        "env"
    } else {
        name.rsplit('.').next().unwrap_or(name)
    }
}

fn instance(cfg: &GradcheckConfig) -> Result<Graph, TrainError> {
    let mut rng = Rng::new(cfg.seed).fork(Stream::Data);
    let n = cfg.nodes;
    let mut edges = Vec::new();
    for u in 0..n {
        // A ring keeps every node connected; chords add degree variety.
        edges.push((u, (u + 1) % n));
        for v in u + 2..n {
            if rng.bernoulli(0.2) {
                edges.push((u, v));
            }
        }
    }
    let labels = (0..n).map(|_| rng.below(cfg.classes)).collect();
    let features = rng.gaussian_matrix(n, cfg.input_dim, 1.0);
    Ok(Graph::new(features, labels, cfg.classes, edges)?)
}

/// Compares tape gradients of the full CaNet loss against central finite
/// differences. Gumbel noise and dropout masks are frozen by reseeding the
/// forward streams for every evaluation.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport, TrainError> {
    let graph = instance(cfg)?;
    let train_cfg = TrainConfig {
        model: ModelConfig {
            backbone: cfg.backbone,
            branches: cfg.branches,
            layers: cfg.layers,
            hidden: cfg.hidden,
            dropout: cfg.dropout,
            ..Default::default()
        },
        seed: cfg.seed,
        ..Default::default()
    };
    train_cfg.validate()?;
    let input = ModelInput::new(&graph, &train_cfg.model);
    let labels: Arc<[usize]> = graph.labels().into();
    let rows: Arc<[usize]> = (0..graph.n()).collect();
    let run_rng = Rng::new(cfg.seed);
    let mut params = init_params(&train_cfg.model, cfg.input_dim, cfg.classes, &run_rng)?;
    // Attention vectors start at zero; randomize them so their gradients and
    // the non-uniform attention path are exercised.
    let mut b_rng = run_rng.fork(Stream::Data).fork_salt(1);
    let b_ids: Vec<_> = params.store.iter().filter(|(_, n, _)| n.ends_with(".b")).map(|(id, ..)| id).collect();
    for id in b_ids {
        let (r, c) = params.store.get(id).shape();
        *params.store.get_mut(id) = b_rng.gaussian_matrix(r, c, 0.5);
    }

    let loss = |store: &ParamStore, grads: bool| -> Result<(f64, Option<Grads>), TrainError> {
        let p = ModelParams {
            store: store.clone(),
            ..params.clone()
        };
        let mut tape = Tape::new();
        if let (true, Some(f)) = (grads, cfg.fault) {
            tape.inject_fault(f);
        }
        let mut rng = ForwardRng::training(&run_rng, 1);
        let out = forward(&mut tape, &p, &input, &train_cfg.model, &mut rng, true)?;
        let terms = total_loss(&mut tape, &out, &labels, &rows, &train_cfg)?;
        let value = tape.scalar(terms.total).expect("loss is a scalar");
        let grads = if grads { Some(tape.backward(terms.total, &p.store)?) } else { None };
        Ok((value, grads))
    };
    let analytic = loss(&params.store, true)?.1.expect("gradients requested");
    let numeric = finite_diff_grad(|s| loss(s, false).map(|(v, _)| v), &params.store, cfg.step)?;

    let mut groups: BTreeMap<&str, (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (id, name, _) in params.store.iter() {
        let entry = groups.entry(group_of(name)).or_default();
        entry.0 += 1;
        entry.1.extend_from_slice(analytic.get(id).values());
        entry.2.extend_from_slice(numeric.get(id).values());
    }
    let groups: Vec<GroupError> = groups
        .into_iter()
        .map(|(group, (matrices, a, n))| GroupError {
            group: group.to_string(),
            matrices,
            scalars: a.len(),
            max_rel_error: relative_error(&a, &n, GRADCHECK_FLOOR),
        })
        .collect();
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        config: cfg.clone(),
        passed: max_rel_error <= cfg.tolerance,
        groups,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_names() {
        assert_eq!(group_of("layer1.branch2.w_self"), "w_self");
        assert_eq!(group_of("env.shared"), "env");
        assert_eq!(group_of("phi_in"), "phi_in");
        assert_eq!(group_of("layer0.a"), "a");
    }

    #[test]
    fn both_backbones_pass_and_corruption_fails() {
        for backbone in [Backbone::Gcn, Backbone::Gat] {
            let cfg = GradcheckConfig { backbone, ..Default::default() };
            let report = gradcheck(&cfg).unwrap();
            assert!(report.passed, "{report:?}");
            let expected = if backbone == Backbone::Gat { 7 } else { 5 };
            assert_eq!(report.groups.len(), expected);
            let broken = gradcheck(&GradcheckConfig {
                fault: Some(GradFault::MatMulTRight),
                ..cfg
            })
            .unwrap();
            assert!(!broken.passed);
        }
    }
}
