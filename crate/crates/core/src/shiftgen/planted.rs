use serde::{Deserialize, Serialize};

use crate::graphio::{split_random, Dataset, Graph, OodGroup};
use crate::metrics::MetricKind;
use crate::numcore::{DenseMatrix, Rng, Stream};

use super::probe::LinearProbe;
use super::{ShiftError, STANDARD_SPLIT};

/// Planted-environment benchmark with known stable and spurious features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedConfig {
    pub nodes_per_env: usize,
    pub classes: usize,
    pub stable_dim: usize,
    /// 0 removes the spurious block entirely.
    pub spurious_dim: usize,
    pub id_envs: usize,
    pub ood_envs: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    /// Distance scale of the stable class means (noise has unit variance).
    pub stable_strength: f64,
    pub spurious_strength: f64,
    /// Norm of a per-environment offset added to the spurious block, which
    /// makes the environment identifiable from the spurious features.
    pub env_signature: f64,
    /// Probability that an observed label is replaced by a different class.
    pub label_noise: f64,
    /// Cyclic class shift of the spurious means per ID environment.
    /// Defaults to `j mod C` for the `j`-th ID environment.
    pub id_shifts: Option<Vec<usize>>,
    /// Cyclic class shift per OOD environment. Defaults to `(j + 1) mod C`
    /// for the `j`-th OOD environment.
    pub ood_shifts: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            nodes_per_env: 1000,
            classes: 3,
            stable_dim: 8,
            spurious_dim: 8,
            id_envs: 3,
            ood_envs: 3,
            p_intra: 0.01,
            p_inter: 0.001,
            stable_strength: 1.5,
            spurious_strength: 3.0,
            env_signature: 3.0,
            label_noise: 0.0,
            id_shifts: None,
            ood_shifts: None,
            seed: 0,
        }
    }
}

impl PlantedConfig {
    fn validate(&self) -> Result<(), ShiftError> {
        let bad = |m: String| Err(ShiftError::Config(m));
        if self.nodes_per_env == 0 || self.classes == 0 {
            return bad("node count and class count must be positive".into());
        }
        if self.stable_dim == 0 {
            return bad("stable_dim must be at least 1".into());
        }
        if self.id_envs == 0 {
            return bad("at least one ID environment is required".into());
        }
        for (name, p) in [
            ("p_intra", self.p_intra),
            ("p_inter", self.p_inter),
            ("label_noise", self.label_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name}={p} outside [0, 1]"));
            }
        }
        for (name, shifts, n) in [
            ("id_shifts", &self.id_shifts, self.id_envs),
            ("ood_shifts", &self.ood_shifts, self.ood_envs),
        ] {
            if let Some(s) = shifts {
                if s.len() != n {
                    return bad(format!("{name} has {} entries for {n} environments", s.len()));
                }
            }
        }
        Ok(())
    }

    /// Spurious class shift of every environment, ID first.
    pub fn shifts(&self) -> Vec<usize> {
        let c = self.classes;
        let id = self.id_shifts.clone().unwrap_or_else(|| (0..self.id_envs).map(|j| j % c).collect());
        let ood = self
            .ood_shifts
            .clone()
            .unwrap_or_else(|| (0..self.ood_envs).map(|j| (j + 1) % c).collect());
        id.into_iter().chain(ood).map(|s| s % c).collect()
    }
}

/// Ground truth of a planted dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    /// `C × stable_dim`, already scaled by the stable strength.
    pub stable_means: Vec<Vec<f64>>,
    /// `C × spurious_dim`, already scaled by the spurious strength.
    pub spurious_means: Vec<Vec<f64>>,
    /// Spurious block of a class-`c` node in environment `e` is centred on
    /// `spurious_means[(c + shifts[e]) % C]`.
    pub shifts: Vec<usize>,
    /// Per-environment offset of the spurious block.
    pub env_offsets: Vec<Vec<f64>>,
    /// Accuracy of the Bayes classifier that sees only the stable block.
    pub stable_bayes_accuracy: f64,
    /// Per environment: Bayes accuracy with all features and the
    /// environment's own shift known.
    pub env_bayes_accuracy: Vec<f64>,
    /// Linear probe fit on the first ID environment, scored per environment.
    pub probe_accuracy: Vec<f64>,
}

fn unit_means(rng: &mut Rng, classes: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| scale * x / norm).collect()
        })
        .collect()
}

fn nearest(x: &[f64], means: &[Vec<f64>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, m) in means.iter().enumerate() {
        let d: f64 = x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

struct Env {
    graph: Graph,
}

fn sample_env(cfg: &PlantedConfig, truth: &PlantedTruth, env: usize, rng: &mut Rng) -> Result<Env, ShiftError> {
    let (n, c) = (cfg.nodes_per_env, cfg.classes);
    let shift = truth.shifts[env];
    let offset = &truth.env_offsets[env];
    let mut classes: Vec<usize> = (0..n).map(|i| i % c).collect();
    rng.shuffle(&mut classes);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if classes[u] == classes[v] { cfg.p_intra } else { cfg.p_inter };
            if rng.bernoulli(p) {
                edges.push((u, v));
            }
        }
    }
    let d = cfg.stable_dim + cfg.spurious_dim;
    let mut features = DenseMatrix::zeros(n, d);
    for (u, &y) in classes.iter().enumerate() {
        let row = features.row_mut(u);
        for (j, m) in truth.stable_means[y].iter().enumerate() {
            row[j] = m + rng.normal();
        }
        for (j, m) in truth.spurious_means[(y + shift) % c].iter().enumerate() {
            row[cfg.stable_dim + j] = m + offset[j] + rng.normal();
        }
    }
    let labels: Vec<usize> = classes
        .iter()
        .map(|&y| {
            if c > 1 && rng.bernoulli(cfg.label_noise) {
                (y + 1 + rng.below(c - 1)) % c
            } else {
                y
            }
        })
        .collect();
    Ok(Env {
        graph: Graph::new(features, labels, c, edges)?,
    })
}

/// Monte-Carlo Bayes rates from one shared sample, so environments that
/// agree in distribution get identical numbers.
fn bayes_rates(cfg: &PlantedConfig, truth: &PlantedTruth, rng: &mut Rng) -> (f64, Vec<f64>) {
    const SAMPLES: usize = 20_000;
    let c = cfg.classes;
    let mut stable_hits = 0usize;
    let mut env_hits = vec![0usize; truth.shifts.len()];
    let mut xs = vec![0.0; cfg.stable_dim];
    let mut xp = vec![0.0; cfg.spurious_dim];
    for i in 0..SAMPLES {
        let y = i % c;
        let observed = if c > 1 && rng.bernoulli(cfg.label_noise) {
            (y + 1 + rng.below(c - 1)) % c
        } else {
            y
        };
        for (j, x) in xs.iter_mut().enumerate() {
            *x = truth.stable_means[y][j] + rng.normal();
        }
        let noise: Vec<f64> = (0..cfg.spurious_dim).map(|_| rng.normal()).collect();
        if nearest(&xs, &truth.stable_means) == observed {
            stable_hits += 1;
        }
        for (e, &shift) in truth.shifts.iter().enumerate() {
            for (j, x) in xp.iter_mut().enumerate() {
                *x = truth.spurious_means[(y + shift) % c][j] + truth.env_offsets[e][j] + noise[j];
            }
            // Joint Gaussian likelihood over both blocks, shift known.
            let mut best = (f64::INFINITY, 0);
            for k in 0..c {
                let ds: f64 = xs.iter().zip(&truth.stable_means[k]).map(|(a, b)| (a - b).powi(2)).sum();
                let dp: f64 = xp
                    .iter()
                    .zip(&truth.spurious_means[(k + shift) % c])
                    .zip(&truth.env_offsets[e])
                    .map(|((a, b), o)| (a - b - o).powi(2))
                    .sum();
                if ds + dp < best.0 {
                    best = (ds + dp, k);
                }
            }
            if best.1 == observed {
                env_hits[e] += 1;
            }
        }
    }
    (
        stable_hits as f64 / SAMPLES as f64,
        env_hits.iter().map(|&h| h as f64 / SAMPLES as f64).collect(),
    )
}

/// Samples one SBM graph per environment. Stable features are centred on
/// class means shared by all environments; spurious features on class
/// means cyclically shifted per environment. The first `id_envs`
/// environments are split 50/25/25 for training; the rest are OOD graphs.
pub fn gen_planted_dataset(cfg: &PlantedConfig) -> Result<Dataset, ShiftError> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut rng = root.fork(Stream::Data);
    let mut truth = PlantedTruth {
        stable_means: unit_means(&mut rng, cfg.classes, cfg.stable_dim, cfg.stable_strength),
        spurious_means: unit_means(&mut rng, cfg.classes, cfg.spurious_dim, cfg.spurious_strength),
        shifts: cfg.shifts(),
        env_offsets: Vec::new(),
        stable_bayes_accuracy: 0.0,
        env_bayes_accuracy: Vec::new(),
        probe_accuracy: Vec::new(),
    };
    truth.env_offsets = unit_means(&mut rng, truth.shifts.len(), cfg.spurious_dim, cfg.env_signature);
    let mut graphs = Vec::with_capacity(truth.shifts.len());
    for e in 0..truth.shifts.len() {
        let mut env_rng = rng.fork_salt(e as u64);
        graphs.push((format!("env_{}", e + 1), sample_env(cfg, &truth, e, &mut env_rng)?.graph));
    }
    let mut probe_rng = root.fork(Stream::Probe);
    let (stable, per_env) = bayes_rates(cfg, &truth, &mut probe_rng);
    truth.stable_bayes_accuracy = stable;
    truth.env_bayes_accuracy = per_env;
    let first = &graphs[0].1;
    let probe = LinearProbe::fit(first.features(), first.labels(), cfg.classes, 200, &probe_rng)?;
    truth.probe_accuracy = graphs
        .iter()
        .map(|(_, g)| probe.accuracy(g.features(), g.labels()))
        .collect::<Result<_, _>>()?;

    let ood_graphs = graphs.split_off(cfg.id_envs);
    let universe: Vec<usize> = (0..cfg.id_envs * cfg.nodes_per_env).collect();
    let mut split = split_random(&universe, STANDARD_SPLIT, cfg.seed)?;
    split.ood_groups = ood_graphs.iter().map(|(n, _)| OodGroup::Graph(n.clone())).collect();
    let generator = serde_json::json!({
        "kind": "planted",
        "config": cfg,
        "ground_truth": truth,
    });
    Ok(Dataset::new("planted", MetricKind::Accuracy, graphs, ood_graphs, split, generator)?)
}

/// Reads the ground truth back out of a generated dataset.
pub fn planted_truth(ds: &Dataset) -> Option<PlantedTruth> {
    serde_json::from_value(ds.generator.get("ground_truth")?.clone()).ok()
}
