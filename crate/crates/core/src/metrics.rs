//! Evaluation metrics and ID/OOD reports.

use serde::{Deserialize, Serialize};

use crate::graphio::{Dataset, GraphError, OodGroup};
use crate::model::{forward, ForwardRng, ModelConfig, ModelError, ModelInput, ModelParams};
use crate::numcore::{DenseMatrix, Rng, Tape};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("metric over an empty input")]
    Empty,
    #[error("predictions ({pred}) and labels ({truth}) differ in length")]
    Length { pred: usize, truth: usize },
    #[error("class {label} outside [0, {classes})")]
    ClassRange { label: usize, classes: usize },
    #[error("ROC-AUC is undefined without both positive and negative examples")]
    Undefined,
}

/// Which metric a dataset is scored with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[default]
    Accuracy,
    RocAuc,
    MacroF1,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::RocAuc => "roc_auc",
            MetricKind::MacroF1 => "macro_f1",
        }
    }
}

fn check_lengths(pred: usize, truth: usize) -> Result<(), MetricError> {
    if pred != truth {
        return Err(MetricError::Length { pred, truth });
    }
    if pred == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64, MetricError> {
    check_lengths(pred.len(), truth.len())?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Unweighted mean of per-class F1 over all `classes`. A class absent from
/// both predictions and labels scores 0.
pub fn macro_f1(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64, MetricError> {
    check_lengths(pred.len(), truth.len())?;
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        for label in [p, t] {
            if label >= classes {
                return Err(MetricError::ClassRange { label, classes });
            }
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let total: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                (2 * tp[c]) as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / classes as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann–Whitney U divided by `n_pos · n_neg`).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check_lengths(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Undefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average 1-based ranks over tie blocks; ranks are multiples of 1/2 so
    // the sum is exact.
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        let pos_in_block = order[i..=j].iter().filter(|&&k| labels[k]).count();
        pos_rank_sum += avg_rank * pos_in_block as f64;
        i = j + 1;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Scores the rows `nodes` of `logits` against `labels` (indexed by row).
pub fn score(
    kind: MetricKind,
    logits: &DenseMatrix,
    labels: &[usize],
    nodes: &[usize],
) -> Result<f64, MetricError> {
    let truth: Vec<usize> = nodes.iter().map(|&v| labels[v]).collect();
    match kind {
        MetricKind::Accuracy => {
            let pred = logits.select_rows(nodes).argmax_rows();
            accuracy(&pred, &truth)
        }
        MetricKind::MacroF1 => {
            let pred = logits.select_rows(nodes).argmax_rows();
            macro_f1(&pred, &truth, logits.cols())
        }
        MetricKind::RocAuc => {
            let probs = logits.select_rows(nodes).row_softmax();
            let scores: Vec<f64> = (0..probs.rows()).map(|i| probs.get(i, 1)).collect();
            let positive: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
            roc_auc(&scores, &positive)
        }
    }
}

/// One evaluated split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetric {
    pub split: String,
    pub metric: MetricKind,
    pub value: f64,
    pub count: usize,
}

/// ID test score plus one entry per OOD group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub test_id: SplitMetric,
    pub ood: Vec<SplitMetric>,
    /// Mean over OOD groups; `None` when the dataset has none.
    pub ood_mean: Option<f64>,
}

impl MetricsReport {
    pub fn new(test_id: SplitMetric, ood: Vec<SplitMetric>) -> Self {
        let ood_mean = (!ood.is_empty()).then(|| ood.iter().map(|m| m.value).sum::<f64>() / ood.len() as f64);
        Self { test_id, ood, ood_mean }
    }

    pub fn entries(&self) -> usize {
        1 + self.ood.len()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn eval_logits(
    params: &ModelParams,
    g: &crate::graphio::Graph,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<DenseMatrix, ModelError> {
    let input = ModelInput::new(g, cfg);
    let mut tape = Tape::new();
    let mut rng = ForwardRng::evaluation(&Rng::new(seed), cfg);
    let out = forward(&mut tape, params, &input, cfg, &mut rng, false)?;
    Ok(tape.value(out.logits).clone())
}

/// Scores `params` on the ID test split and on every OOD group, using the
/// dataset's metric and an evaluation-mode forward pass seeded by `seed`.
///
/// Node-list OOD groups index the union of the ID graphs; graph OOD groups
/// are scored on all of their nodes.
pub fn eval_report(
    params: &ModelParams,
    dataset: &Dataset,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<MetricsReport, EvalError> {
    let metric = dataset.metric;
    let union = dataset.id_union()?;
    let id_logits = eval_logits(params, &union, cfg, seed)?;
    let entry = |split: String, logits: &DenseMatrix, labels: &[usize], nodes: &[usize]| {
        Ok::<_, EvalError>(SplitMetric {
            split,
            metric,
            value: score(metric, logits, labels, nodes)?,
            count: nodes.len(),
        })
    };
    let test_id = entry("test_id".into(), &id_logits, union.labels(), &dataset.split.test_id)?;
    let mut ood = Vec::with_capacity(dataset.split.ood_groups.len());
    for (i, group) in dataset.split.ood_groups.iter().enumerate() {
        ood.push(match group {
            OodGroup::Nodes(nodes) => entry(format!("ood_{}", i + 1), &id_logits, union.labels(), nodes)?,
            OodGroup::Graph(name) => {
                let g = dataset
                    .ood_graph(name)
                    .ok_or_else(|| GraphError::Split(format!("unknown OOD graph {name}")))?;
                let logits = eval_logits(params, g, cfg, seed)?;
                let all: Vec<usize> = (0..g.n()).collect();
                entry(name.clone(), &logits, g.labels(), &all)?
            }
        });
    }
    Ok(MetricsReport::new(test_id, ood))
}
