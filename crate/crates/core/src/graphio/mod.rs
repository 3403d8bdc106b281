//! Graph container, text formats, adjacency normalization and ID/OOD splits.

mod dataset;
mod io;
mod split;

use std::collections::BTreeSet;
use std::path::PathBuf;

use crate::numcore::{DenseMatrix, NumError, SparseAdj};

pub use dataset::{load_dataset, save_dataset, Dataset, DatasetManifest, DATASET_MANIFEST};
pub use io::{load_graph, save_graph, EDGES_FILE, FEATURES_FILE, LABELS_FILE};
pub use split::{split_random, OodGroup, SplitSpec, SPLITS_FILE};

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: {msg}")]
    Parse { file: PathBuf, line: usize, msg: String },
    #[error("{file}:{line}: feature row has {found} values, expected {expected}")]
    RaggedFeatures {
        file: PathBuf,
        line: usize,
        found: usize,
        expected: usize,
    },
    #[error("{file}:{line}: label {label} outside [0, {classes})")]
    LabelOutOfRange {
        file: PathBuf,
        line: usize,
        label: usize,
        classes: usize,
    },
    #[error("{file}:{line}: node id {node} outside [0, {n})")]
    NodeOutOfRange {
        file: PathBuf,
        line: usize,
        node: usize,
        n: usize,
    },
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Node-labelled undirected graph with dense features.
///
/// Edges are stored canonically as `(u, v)` with `u < v`, each pair once.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    features: DenseMatrix,
    labels: Vec<usize>,
    num_classes: usize,
    edges: Vec<(usize, usize)>,
    degrees: Vec<usize>,
}

impl Graph {
    /// Validates and canonicalizes. Duplicate pairs collapse; self-pairs are
    /// dropped since every propagation rule handles the center node itself.
    pub fn new(
        features: DenseMatrix,
        labels: Vec<usize>,
        num_classes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, GraphError> {
        let n = features.rows();
        if labels.len() != n {
            return Err(GraphError::Invalid(format!(
                "{} labels for {n} feature rows",
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(GraphError::Invalid(format!("label {y} outside [0, {num_classes})")));
        }
        if !features.is_finite() {
            return Err(GraphError::Invalid("non-finite feature value".into()));
        }
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(GraphError::Invalid(format!("edge ({u}, {v}) in a {n}-node graph")));
            }
            if u != v {
                set.insert((u.min(v), u.max(v)));
            }
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut degrees = vec![0; n];
        for &(u, v) in &edges {
            degrees[u] += 1;
            degrees[v] += 1;
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            edges,
            degrees,
        })
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    /// Same structure and labels, different features.
    pub fn with_features(&self, features: DenseMatrix) -> Result<Self, GraphError> {
        if features.rows() != self.n() {
            return Err(GraphError::Invalid(format!(
                "{} feature rows for {} nodes",
                features.rows(),
                self.n()
            )));
        }
        if !features.is_finite() {
            return Err(GraphError::Invalid("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            ..self.clone()
        })
    }

    /// Disjoint union; node ids of later graphs are offset by the sizes of
    /// earlier ones.
    pub fn disjoint_union(graphs: &[&Graph]) -> Result<Self, GraphError> {
        let first = graphs
            .first()
            .ok_or_else(|| GraphError::Invalid("union of zero graphs".into()))?;
        let (d, c) = (first.feature_dim(), first.num_classes);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        let mut edges = Vec::new();
        let mut offset = 0;
        for g in graphs {
            if g.feature_dim() != d || g.num_classes != c {
                return Err(GraphError::Invalid(
                    "union of graphs with different feature or class counts".into(),
                ));
            }
            feats.push(&g.features);
            labels.extend_from_slice(&g.labels);
            edges.extend(g.edges.iter().map(|&(u, v)| (u + offset, v + offset)));
            offset += g.n();
        }
        let features = DenseMatrix::vstack(&feats)?;
        Graph::new(features, labels, c, edges)
    }
}

/// How edge coefficients are normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `1/√(d_u d_v)`.
    #[default]
    Symmetric,
    /// `1/d_u`.
    Row,
}

/// Normalized CSR adjacency with `1/√(d_u·d_v)` coefficients (or `1/d_u`
/// for row normalization). With `add_self_loops` every node gets an entry
/// `(u, u)` and degrees count it. Isolated nodes without self-loops keep an
/// empty row.
pub fn build_norm_adj(g: &Graph, add_self_loops: bool) -> SparseAdj {
    build_adj(g, add_self_loops, Normalization::Symmetric)
}

pub fn build_adj(g: &Graph, add_self_loops: bool, norm: Normalization) -> SparseAdj {
    let n = g.n();
    let loop_extra = usize::from(add_self_loops);
    let deg: Vec<f64> = g.degrees.iter().map(|&d| (d + loop_extra) as f64).collect();
    let coef = |u: usize, v: usize| match norm {
        Normalization::Symmetric => 1.0 / (deg[u] * deg[v]).sqrt(),
        Normalization::Row => 1.0 / deg[u],
    };
    let mut trips = Vec::with_capacity(2 * g.edges.len() + loop_extra * n);
    for &(u, v) in &g.edges {
        trips.push((u, v, coef(u, v)));
        trips.push((v, u, coef(v, u)));
    }
    if add_self_loops {
        trips.extend((0..n).map(|u| (u, u, coef(u, u))));
    }
    SparseAdj::from_triplets(n, trips).expect("canonical edges are in range")
}

/// Neighborhood structure `𝒩_u ∪ {u}` with unit values, used by attention.
pub fn build_attention_structure(g: &Graph) -> SparseAdj {
    let n = g.n();
    let mut trips = Vec::with_capacity(2 * g.edges.len() + n);
    for &(u, v) in &g.edges {
        trips.push((u, v, 1.0));
        trips.push((v, u, 1.0));
    }
    trips.extend((0..n).map(|u| (u, u, 1.0)));
    SparseAdj::from_triplets(n, trips).expect("canonical edges are in range")
}
