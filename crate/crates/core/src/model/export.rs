use std::fs;
use std::path::{Path, PathBuf};

use crate::numcore::DenseMatrix;

use super::{Layout, ModelError, ModelParams};

/// Writes `W_D` of every branch in `layer` (1-based) as
/// `layer{l}_branch{k}_w_d.csv`. The first line is `# rows,cols`; each
/// following line is one matrix row.
pub fn export_branch_weights(
    params: &ModelParams,
    layer: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>, ModelError> {
    let Layout::Canet(layout) = &params.layout else {
        return Err(ModelError::Incompatible("branch weights exist only for CaNet models".into()));
    };
    let layers = layout.layers.len();
    if layer == 0 || layer > layers {
        return Err(ModelError::LayerIndex { layer, layers });
    }
    fs::create_dir_all(dir).map_err(|source| ModelError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    for (k, branch) in layout.layers[layer - 1].iter().enumerate() {
        let path = dir.join(format!("layer{layer}_branch{k}_w_d.csv"));
        let text = matrix_csv(params.store.get(branch.w_d));
        fs::write(&path, text).map_err(|source| ModelError::Io {
            path: path.clone(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}

fn matrix_csv(m: &DenseMatrix) -> String {
    let mut out = format!("# {},{}\n", m.rows(), m.cols());
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Reads a matrix written by [`export_branch_weights`].
pub fn import_matrix_csv(path: &Path) -> Result<DenseMatrix, ModelError> {
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |msg: String| ModelError::Parse(format!("{}: {msg}", path.display()));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let shape = header
        .strip_prefix("# ")
        .and_then(|s| s.split_once(','))
        .ok_or_else(|| bad(format!("bad shape header {header:?}")))?;
    let rows: usize = shape.0.trim().parse().map_err(|_| bad("bad row count".into()))?;
    let cols: usize = shape.1.trim().parse().map_err(|_| bad("bad column count".into()))?;
    let mut values = Vec::with_capacity(rows * cols);
    for (i, line) in lines.enumerate() {
        let before = values.len();
        for field in line.split(',') {
            values.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| bad(format!("line {}: bad number {field:?}", i + 2)))?,
            );
        }
        if values.len() - before != cols {
            return Err(bad(format!("line {} has {} fields, expected {cols}", i + 2, values.len() - before)));
        }
    }
    DenseMatrix::from_vec(rows, cols, values).map_err(|e| bad(e.to_string()))
}
