use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::GraphError;
use crate::numcore::{Rng, Stream};

pub const SPLITS_FILE: &str = "splits.json";

/// One out-of-distribution evaluation group: either a node set of the ID
/// graph union, or a whole OOD graph referenced by directory name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OodGroup {
    Nodes(Vec<usize>),
    Graph(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test_id: Vec<usize>,
    #[serde(default)]
    pub ood_groups: Vec<OodGroup>,
}

impl SplitSpec {
    /// Checks disjointness, bounds against the ID universe size, and that
    /// every node-set OOD group is nonempty.
    pub fn validate(&self, universe: usize) -> Result<(), GraphError> {
        let mut seen = HashSet::new();
        for (name, set) in [("train", &self.train), ("valid", &self.valid), ("test_id", &self.test_id)] {
            for &v in set {
                if v >= universe {
                    return Err(GraphError::Split(format!("{name} node {v} outside [0, {universe})")));
                }
                if !seen.insert(v) {
                    return Err(GraphError::Split(format!("node {v} appears twice (in {name})")));
                }
            }
        }
        if self.train.is_empty() {
            return Err(GraphError::Split("empty training set".into()));
        }
        for (i, g) in self.ood_groups.iter().enumerate() {
            match g {
                OodGroup::Nodes(nodes) if nodes.is_empty() => {
                    return Err(GraphError::Split(format!("OOD group {i} is empty")));
                }
                OodGroup::Nodes(nodes) => {
                    if let Some(&v) = nodes.iter().find(|&&v| v >= universe) {
                        return Err(GraphError::Split(format!("OOD group {i} node {v} outside [0, {universe})")));
                    }
                }
                OodGroup::Graph(name) if name.is_empty() => {
                    return Err(GraphError::Split(format!("OOD group {i} has an empty graph name")));
                }
                OodGroup::Graph(_) => {}
            }
        }
        Ok(())
    }
}

/// Random train/valid/test split of `universe`.
///
/// Valid and test sizes are `floor(n·ratio)`; the remainder goes to train.
/// Deterministic given `seed`. Each returned set is sorted.
pub fn split_random(universe: &[usize], ratios: (f64, f64, f64), seed: u64) -> Result<SplitSpec, GraphError> {
    let (tr, va, te) = ratios;
    if universe.is_empty() {
        return Err(GraphError::Split("empty node universe".into()));
    }
    if [tr, va, te].iter().any(|r| !(0.0..=1.0).contains(r)) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(GraphError::Split(format!("ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let n = universe.len();
    let n_valid = (n as f64 * va).floor() as usize;
    let n_test = (n as f64 * te).floor() as usize;
    let n_train = n - n_valid - n_test;

    let mut order = universe.to_vec();
    Rng::new(seed).fork(Stream::Split).shuffle(&mut order);
    let mut train = order[..n_train].to_vec();
    let mut valid = order[n_train..n_train + n_valid].to_vec();
    let mut test_id = order[n_train + n_valid..].to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    test_id.sort_unstable();
    Ok(SplitSpec {
        train,
        valid,
        test_id,
        ood_groups: Vec::new(),
    })
}
