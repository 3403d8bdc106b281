use std::collections::HashSet;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::graphio::{Dataset, SplitSpec};
use crate::metrics::{eval_report, score, MetricKind, MetricsReport};
use crate::model::{forward, init_params, ForwardRng, Layout, ModelConfig, ModelError, ModelInput, ModelParams};
use crate::numcore::{AdamConfig, AdamState, NumError, ParamId, Rng, Tape, RNG_ALGORITHM};

use super::loss::total_loss;
use super::{TrainConfig, TrainError};

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub supervised: f64,
    /// Unweighted regularizer value; 0 when it is not part of the loss.
    pub regularizer: f64,
    pub train: f64,
    pub valid: f64,
    pub test_id: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub config: TrainConfig,
    /// Parameters of the selected epoch.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; 0 means the initialization.
    pub selected_epoch: usize,
    pub best_valid: f64,
    pub metrics: MetricsReport,
    pub epoch_seconds: Vec<f64>,
}

/// The serialized form of a [`TrainResult`] (everything but the weights).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub seed: u64,
    pub rng_algorithm: String,
    pub selected_epoch: usize,
    pub best_valid: f64,
    pub metrics: MetricsReport,
    pub history: Vec<EpochRecord>,
    pub epoch_seconds: Vec<f64>,
}

impl TrainResult {
    pub fn record(&self) -> RunRecord {
        RunRecord {
            config: self.config.clone(),
            seed: self.config.seed,
            rng_algorithm: RNG_ALGORITHM.to_string(),
            selected_epoch: self.selected_epoch,
            best_valid: self.best_valid,
            metrics: self.metrics.clone(),
            history: self.history.clone(),
            epoch_seconds: self.epoch_seconds.clone(),
        }
    }
}

/// Train / valid / test-ID scores of one evaluation pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitScores {
    pub train: f64,
    pub valid: f64,
    pub test_id: f64,
}

/// Scores the ID splits with an evaluation-mode forward pass.
pub fn evaluate_splits(
    params: &ModelParams,
    input: &ModelInput,
    cfg: &ModelConfig,
    run_rng: &Rng,
    labels: &[usize],
    split: &SplitSpec,
    metric: MetricKind,
) -> Result<SplitScores, TrainError> {
    let mut tape = Tape::new();
    let mut rng = ForwardRng::evaluation(run_rng, cfg);
    let out = forward(&mut tape, params, input, cfg, &mut rng, false)?;
    let logits = tape.value(out.logits);
    let s = |nodes: &[usize]| -> Result<f64, TrainError> {
        if nodes.is_empty() {
            Ok(f64::NAN)
        } else {
            Ok(score(metric, logits, labels, nodes)?)
        }
    };
    Ok(SplitScores {
        train: s(&split.train)?,
        valid: s(&split.valid)?,
        test_id: s(&split.test_id)?,
    })
}

fn non_finite(epoch: usize, last: Option<&EpochRecord>) -> impl Fn(TrainError) -> TrainError + '_ {
    move |e| match e {
        TrainError::Model(ModelError::Num(NumError::NonFinite { op })) => TrainError::NonFinite {
            epoch,
            detail: match last {
                Some(r) => format!(
                    "{op} overflowed; previous epoch had supervised={} regularizer={}",
                    r.supervised, r.regularizer
                ),
                None => format!("{op} overflowed"),
            },
        },
        other => other,
    }
}

/// Full-batch training on the union of the ID graphs, keeping the
/// parameters with the best validation score.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainResult, TrainError> {
    cfg.validate()?;
    if dataset.split.train.is_empty() || dataset.split.valid.is_empty() {
        return Err(TrainError::Config("train and valid splits must be nonempty".into()));
    }
    let graph = dataset.id_union()?;
    let input = ModelInput::new(&graph, &cfg.model);
    let labels: Arc<[usize]> = graph.labels().into();
    let train_rows: Arc<[usize]> = dataset.split.train.clone().into();
    let run_rng = Rng::new(cfg.seed);
    let mut params = init_params(&cfg.model, dataset.feature_dim(), dataset.num_classes(), &run_rng)?;
    let adam = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let env_ids: HashSet<ParamId> = match &params.layout {
        Layout::Canet(l) => l.estimator_ids().iter().copied().collect(),
        Layout::Baseline(_) => HashSet::new(),
    };
    let lr_of = |id: ParamId| match cfg.lr_env {
        Some(lr) if env_ids.contains(&id) => lr,
        _ => cfg.lr,
    };
    let mut state = AdamState::new(&params.store);
    let evaluate = |p: &ModelParams| {
        evaluate_splits(p, &input, &cfg.model, &run_rng, &labels, &dataset.split, dataset.metric)
    };

    let mut best_valid = evaluate(&params)?.valid;
    let mut best_params = params.clone();
    let mut selected_epoch = 0;
    let mut history: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut epoch_seconds = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let (loss, supervised, regularizer, grads) = (|| -> Result<_, TrainError> {
            let mut tape = Tape::new();
            let mut rng = ForwardRng::training(&run_rng, epoch as u64);
            let out = forward(&mut tape, &params, &input, &cfg.model, &mut rng, true)?;
            let terms = total_loss(&mut tape, &out, &labels, &train_rows, cfg)?;
            let grads = tape.backward(terms.total, &params.store)?;
            if params.store.ids().any(|id| !grads.get(id).is_finite()) {
                return Err(NumError::NonFinite { op: "backward" }.into());
            }
            let value = |v| tape.scalar(v).expect("loss terms are scalars");
            Ok((
                value(terms.total),
                value(terms.supervised),
                terms.regularizer.map_or(0.0, value),
                grads,
            ))
        })()
        .map_err(non_finite(epoch, history.last()))?;
        state.step_with_lr(&mut params.store, &grads, &adam, lr_of)?;
        let scores = evaluate(&params).map_err(non_finite(epoch, history.last()))?;
        epoch_seconds.push(start.elapsed().as_secs_f64());
        history.push(EpochRecord {
            epoch,
            loss,
            supervised,
            regularizer,
            train: scores.train,
            valid: scores.valid,
            test_id: scores.test_id,
        });
        if scores.valid > best_valid {
            best_valid = scores.valid;
            best_params = params.clone();
            selected_epoch = epoch;
        }
        if let Some(p) = cfg.patience {
            if epoch - selected_epoch >= p {
                break;
            }
        }
    }

    let metrics = eval_report(&best_params, dataset, &cfg.model, cfg.seed)?;
    Ok(TrainResult {
        config: cfg.clone(),
        params: best_params,
        history,
        selected_epoch,
        best_valid,
        metrics,
        epoch_seconds,
    })
}
