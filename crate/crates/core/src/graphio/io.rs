use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Graph, GraphError};
use crate::numcore::DenseMatrix;

pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.tsv";
pub const LABELS_FILE: &str = "labels.tsv";

fn read(path: &Path) -> Result<String, GraphError> {
    if !path.exists() {
        return Err(GraphError::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write(path: &Path, contents: &str) -> Result<(), GraphError> {
    fs::write(path, contents).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_err(file: &Path, line: usize, msg: impl Into<String>) -> GraphError {
    GraphError::Parse {
        file: file.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_features(path: &Path) -> Result<DenseMatrix, GraphError> {
    let text = read(path)?;
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let row: Vec<f64> = if line.is_empty() {
            Vec::new()
        } else {
            line.split('\t')
                .map(|tok| {
                    tok.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| parse_err(path, lineno, format!("invalid feature value {tok:?}")))
                })
                .collect::<Result<_, _>>()?
        };
        let expected = *width.get_or_insert(row.len());
        if row.len() != expected || expected == 0 {
            return Err(GraphError::RaggedFeatures {
                file: path.to_path_buf(),
                line: lineno,
                found: row.len(),
                expected,
            });
        }
        values.extend(row);
        rows += 1;
    }
    Ok(DenseMatrix::from_vec(rows, width.unwrap_or(0), values)?)
}

fn parse_labels(path: &Path, n: usize, num_classes: Option<usize>) -> Result<(Vec<usize>, usize), GraphError> {
    let text = read(path)?;
    let mut labels = Vec::with_capacity(n);
    for (i, line) in text.lines().enumerate() {
        let label: usize = line
            .trim()
            .parse()
            .map_err(|_| parse_err(path, i + 1, format!("invalid label {line:?}")))?;
        if let Some(c) = num_classes {
            if label >= c {
                return Err(GraphError::LabelOutOfRange {
                    file: path.to_path_buf(),
                    line: i + 1,
                    label,
                    classes: c,
                });
            }
        }
        labels.push(label);
    }
    if labels.len() != n {
        return Err(parse_err(
            path,
            labels.len(),
            format!("{} labels for {n} feature rows", labels.len()),
        ));
    }
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Ok((labels, classes))
}

fn parse_edges(path: &Path, n: usize) -> Result<Vec<(usize, usize)>, GraphError> {
    let text = read(path)?;
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let ids: Vec<&str> = line.split('\t').collect();
        if ids.len() != 2 {
            return Err(parse_err(path, lineno, format!("expected 2 node ids, found {}", ids.len())));
        }
        let mut pair = [0usize; 2];
        for (slot, tok) in pair.iter_mut().zip(&ids) {
            let node: usize = tok
                .trim()
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("non-integer node id {tok:?}")))?;
            if node >= n {
                return Err(GraphError::NodeOutOfRange {
                    file: path.to_path_buf(),
                    line: lineno,
                    node,
                    n,
                });
            }
            *slot = node;
        }
        edges.push((pair[0], pair[1]));
    }
    Ok(edges)
}

/// Reads `edges.tsv`, `features.tsv` and `labels.tsv` from `dir`.
///
/// When `num_classes` is `None` the class count is inferred as the largest
/// label plus one.
pub fn load_graph(dir: &Path, num_classes: Option<usize>) -> Result<Graph, GraphError> {
    let features = parse_features(&dir.join(FEATURES_FILE))?;
    let (labels, classes) = parse_labels(&dir.join(LABELS_FILE), features.rows(), num_classes)?;
    let edges = parse_edges(&dir.join(EDGES_FILE), features.rows())?;
    Graph::new(features, labels, classes, edges)
}

/// Writes a graph in the three-file text format. Floats use the shortest
/// representation that parses back to the same value.
pub fn save_graph(g: &Graph, dir: &Path) -> Result<(), GraphError> {
    fs::create_dir_all(dir).map_err(|source| GraphError::Io {
        path: PathBuf::from(dir),
        source,
    })?;
    let mut edges = String::new();
    for &(u, v) in g.edges() {
        let _ = writeln!(edges, "{u}\t{v}");
    }
    let mut feats = String::new();
    for i in 0..g.n() {
        let row = g.features().row(i);
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                feats.push('\t');
            }
            let _ = write!(feats, "{v}");
        }
        feats.push('\n');
    }
    let mut labels = String::new();
    for y in g.labels() {
        let _ = writeln!(labels, "{y}");
    }
    write(&dir.join(EDGES_FILE), &edges)?;
    write(&dir.join(FEATURES_FILE), &feats)?;
    write(&dir.join(LABELS_FILE), &labels)
}
