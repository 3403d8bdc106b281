use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::graphio::Dataset;

use super::{train, TrainConfig, TrainError};

/// Values to try per hyperparameter. An empty list keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub layers: Vec<usize>,
    pub hidden: Vec<usize>,
    pub branches: Vec<usize>,
    pub tau: Vec<f64>,
    pub lambda: Vec<f64>,
    pub lr: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub dropout: Vec<f64>,
    pub epochs: Vec<usize>,
}

impl SweepGrid {
    /// The search space used for the real benchmarks.
    pub fn full() -> Self {
        Self {
            layers: vec![2, 3, 4, 5],
            hidden: vec![32, 64, 128],
            branches: vec![3, 5, 10],
            tau: vec![1.0, 3.0, 5.0, 10.0],
            lambda: vec![0.1, 0.5, 1.0, 2.0],
            lr: vec![0.001, 0.005, 0.01, 0.02],
            weight_decay: vec![0.0, 5e-5, 5e-4, 5e-3],
            dropout: vec![0.0, 0.1, 0.2, 0.5],
            epochs: Vec::new(),
        }
    }

    /// Cartesian product applied on top of `base`, in a fixed order.
    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        fn expand<T: Clone>(
            configs: Vec<TrainConfig>,
            values: &[T],
            set: impl Fn(&mut TrainConfig, T),
        ) -> Vec<TrainConfig> {
            if values.is_empty() {
                return configs;
            }
            let mut out = Vec::with_capacity(configs.len() * values.len());
            for c in configs {
                for v in values {
                    let mut c = c.clone();
                    set(&mut c, v.clone());
                    out.push(c);
                }
            }
            out
        }
        let mut out = vec![base.clone()];
        out = expand(out, &self.layers, |c, v| c.model.layers = v);
        out = expand(out, &self.hidden, |c, v| c.model.hidden = v);
        out = expand(out, &self.branches, |c, v| c.model.branches = v);
        out = expand(out, &self.tau, |c, v| c.model.tau = v);
        out = expand(out, &self.lambda, |c, v| c.lambda = v);
        out = expand(out, &self.lr, |c, v| c.lr = v);
        out = expand(out, &self.weight_decay, |c, v| c.weight_decay = v);
        out = expand(out, &self.dropout, |c, v| c.model.dropout = v);
        out = expand(out, &self.epochs, |c, v| c.epochs = v);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub config_index: usize,
    pub seed: u64,
    pub selected_epoch: usize,
    pub valid: f64,
    pub test_id: f64,
    pub ood_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub configs: Vec<TrainConfig>,
    /// Sorted by `(config_index, seed)`.
    pub runs: Vec<SweepRun>,
    /// Mean validation score per config.
    pub mean_valid: Vec<f64>,
    pub best_index: usize,
    pub best_config: TrainConfig,
}

/// Trains every grid point with every seed and picks the config with the
/// highest mean validation score (first on ties). Runs are spread over
/// `jobs` worker threads; each run is independent and the merged result
/// does not depend on scheduling.
pub fn sweep(
    dataset: &Dataset,
    base: &TrainConfig,
    grid: &SweepGrid,
    seeds: &[u64],
    jobs: usize,
) -> Result<SweepResult, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::Config("sweep needs at least one seed".into()));
    }
    let configs = grid.configs(base);
    for c in &configs {
        c.validate()?;
    }
    let tasks: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let run = |&(i, seed): &(usize, u64)| -> Result<SweepRun, TrainError> {
        let cfg = TrainConfig {
            seed,
            ..configs[i].clone()
        };
        let r = train(dataset, &cfg)?;
        Ok(SweepRun {
            config_index: i,
            seed,
            selected_epoch: r.selected_epoch,
            valid: r.best_valid,
            test_id: r.metrics.test_id.value,
            ood_mean: r.metrics.ood_mean,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| TrainError::Config(format!("cannot start worker pool: {e}")))?;
    let mut runs = pool.install(|| tasks.par_iter().map(run).collect::<Result<Vec<_>, _>>())?;
    runs.sort_by_key(|r| (r.config_index, r.seed));

    let mean_valid: Vec<f64> = (0..configs.len())
        .map(|i| {
            let vals: Vec<f64> = runs.iter().filter(|r| r.config_index == i).map(|r| r.valid).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect();
    let mut best_index = 0;
    for (i, &v) in mean_valid.iter().enumerate() {
        if v > mean_valid[best_index] {
            best_index = i;
        }
    }
    Ok(SweepResult {
        best_config: configs[best_index].clone(),
        configs,
        runs,
        mean_valid,
        best_index,
    })
}
