use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::write;
use super::{load_graph, save_graph, Graph, GraphError, OodGroup, SplitSpec, SPLITS_FILE};
use crate::metrics::MetricKind;

pub const DATASET_MANIFEST: &str = "dataset.json";

/// On-disk description of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    #[serde(rename = "C")]
    pub num_classes: usize,
    #[serde(rename = "D")]
    pub feature_dim: usize,
    #[serde(default)]
    pub metric: MetricKind,
    pub id_graphs: Vec<String>,
    #[serde(default)]
    pub ood_graphs: Vec<String>,
    #[serde(default)]
    pub generator: serde_json::Value,
}

/// ID graphs (trained on, jointly as a disjoint union), OOD graphs and the
/// split. Split node ids index the union of the ID graphs in order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub metric: MetricKind,
    pub id_graphs: Vec<(String, Graph)>,
    pub ood_graphs: Vec<(String, Graph)>,
    pub split: SplitSpec,
    pub generator: serde_json::Value,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        metric: MetricKind,
        id_graphs: Vec<(String, Graph)>,
        ood_graphs: Vec<(String, Graph)>,
        split: SplitSpec,
        generator: serde_json::Value,
    ) -> Result<Self, GraphError> {
        let ds = Self {
            name: name.into(),
            metric,
            id_graphs,
            ood_graphs,
            split,
            generator,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<(), GraphError> {
        let (_, first) = self
            .id_graphs
            .first()
            .ok_or_else(|| GraphError::Invalid("dataset without ID graphs".into()))?;
        let (d, c) = (first.feature_dim(), first.num_classes());
        for (name, g) in self.id_graphs.iter().chain(&self.ood_graphs) {
            if g.feature_dim() != d || g.num_classes() != c {
                return Err(GraphError::Invalid(format!(
                    "graph {name} has D={} C={}, expected D={d} C={c}",
                    g.feature_dim(),
                    g.num_classes()
                )));
            }
        }
        if self.metric == MetricKind::RocAuc && c != 2 {
            return Err(GraphError::Invalid(format!("roc_auc needs 2 classes, dataset has {c}")));
        }
        self.split.validate(self.id_nodes())?;
        for group in &self.split.ood_groups {
            if let OodGroup::Graph(name) = group {
                if self.ood_graph(name).is_none() {
                    return Err(GraphError::Split(format!("OOD group names unknown graph {name}")));
                }
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.id_graphs[0].1.num_classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.id_graphs[0].1.feature_dim()
    }

    /// Total number of nodes across the ID graphs.
    pub fn id_nodes(&self) -> usize {
        self.id_graphs.iter().map(|(_, g)| g.n()).sum()
    }

    pub fn id_union(&self) -> Result<Graph, GraphError> {
        let graphs: Vec<&Graph> = self.id_graphs.iter().map(|(_, g)| g).collect();
        Graph::disjoint_union(&graphs)
    }

    pub fn ood_graph(&self, name: &str) -> Option<&Graph> {
        self.ood_graphs.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            name: self.name.clone(),
            num_classes: self.num_classes(),
            feature_dim: self.feature_dim(),
            metric: self.metric,
            id_graphs: self.id_graphs.iter().map(|(n, _)| n.clone()).collect(),
            ood_graphs: self.ood_graphs.iter().map(|(n, _)| n.clone()).collect(),
            generator: self.generator.clone(),
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("manifest types serialize");
    s.push('\n');
    s
}

/// Writes `dataset.json`, `splits.json` and one directory per graph.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), GraphError> {
    fs::create_dir_all(dir).map_err(|source| GraphError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for (name, g) in ds.id_graphs.iter().chain(&ds.ood_graphs) {
        save_graph(g, &dir.join(name))?;
    }
    write(&dir.join(SPLITS_FILE), &to_json(&ds.split))?;
    write(&dir.join(DATASET_MANIFEST), &to_json(&ds.manifest()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, GraphError> {
    if !path.exists() {
        return Err(GraphError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| GraphError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, GraphError> {
    let manifest: DatasetManifest = read_json(&dir.join(DATASET_MANIFEST))?;
    let split: SplitSpec = read_json(&dir.join(SPLITS_FILE))?;
    let load = |names: &[String]| -> Result<Vec<(String, Graph)>, GraphError> {
        names
            .iter()
            .map(|n| {
                let g = load_graph(&dir.join(n), Some(manifest.num_classes))?;
                if g.feature_dim() != manifest.feature_dim {
                    return Err(GraphError::Invalid(format!(
                        "graph {n} has {} features, manifest says {}",
                        g.feature_dim(),
                        manifest.feature_dim
                    )));
                }
                Ok((n.clone(), g))
            })
            .collect()
    };
    let id_graphs = load(&manifest.id_graphs)?;
    let ood_graphs = load(&manifest.ood_graphs)?;
    Dataset::new(
        manifest.name,
        manifest.metric,
        id_graphs,
        ood_graphs,
        split,
        manifest.generator,
    )
}
