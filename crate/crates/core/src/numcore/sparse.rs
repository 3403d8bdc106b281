//! Compressed-sparse-row adjacency and the sparse × dense kernels used for
//! message passing.

use super::{DenseMatrix, NumError};

/// CSR adjacency with one coefficient per stored entry.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseAdj {
    n: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    edge_values: Vec<f64>,
}

impl SparseAdj {
    /// Builds a CSR matrix from `(row, col, value)` triplets. Entries are sorted
    /// by `(row, col)`; duplicates are kept as separate entries.
    pub fn from_triplets(n: usize, mut entries: Vec<(usize, usize, f64)>) -> Result<Self, NumError> {
        if let Some(&(r, c, _)) = entries.iter().find(|&&(r, c, _)| r >= n || c >= n) {
            return Err(NumError::Shape {
                op: "sparse_from_triplets",
                detail: format!("entry ({r}, {c}) outside a {n}-node adjacency"),
            });
        }
        entries.sort_by_key(|a| (a.0, a.1));
        let mut row_offsets = vec![0usize; n + 1];
        for &(r, _, _) in &entries {
            row_offsets[r + 1] += 1;
        }
        for i in 0..n {
            row_offsets[i + 1] += row_offsets[i];
        }
        let (col_indices, edge_values) = entries.into_iter().map(|(_, c, v)| (c, v)).unzip();
        Ok(Self {
            n,
            row_offsets,
            col_indices,
            edge_values,
        })
    }

    pub fn empty(n: usize) -> Self {
        Self {
            n,
            row_offsets: vec![0; n + 1],
            col_indices: Vec::new(),
            edge_values: Vec::new(),
        }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of stored entries.
    #[inline]
    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn edge_values(&self) -> &[f64] {
        &self.edge_values
    }

    /// Stored `(col, value)` pairs of row `u`.
    pub fn row_entries(&self, u: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_offsets[u]..self.row_offsets[u + 1];
        self.col_indices[range.clone()]
            .iter()
            .copied()
            .zip(self.edge_values[range].iter().copied())
    }

    /// Value stored at `(u, v)`, summing duplicates.
    pub fn value(&self, u: usize, v: usize) -> Option<f64> {
        let mut found = None;
        for (c, val) in self.row_entries(u) {
            if c == v {
                *found.get_or_insert(0.0) += val;
            }
        }
        found
    }

    /// Row index of every stored entry, aligned with `col_indices`.
    pub fn entry_rows(&self) -> Vec<usize> {
        let mut rows = Vec::with_capacity(self.nnz());
        for u in 0..self.n {
            rows.extend(std::iter::repeat_n(u, self.row_offsets[u + 1] - self.row_offsets[u]));
        }
        rows
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.n, self.n);
        for u in 0..self.n {
            for (v, val) in self.row_entries(u) {
                d.set(u, v, d.get(u, v) + val);
            }
        }
        d
    }

    /// Same sparsity pattern with different per-entry values.
    pub fn with_values(&self, edge_values: Vec<f64>) -> Result<Self, NumError> {
        if edge_values.len() != self.nnz() {
            return Err(NumError::Shape {
                op: "with_values",
                detail: format!("{} values for {} stored entries", edge_values.len(), self.nnz()),
            });
        }
        Ok(Self {
            edge_values,
            ..self.clone()
        })
    }

    /// True when every stored `(u, v)` has a stored `(v, u)` with the same value.
    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|u| {
            self.row_entries(u)
                .all(|(v, _)| self.value(v, u) == self.value(u, v))
        })
    }
}

fn check_rows(op: &'static str, n: usize, m: &DenseMatrix) -> Result<(), NumError> {
    if m.rows() != n {
        return Err(NumError::Shape {
            op,
            detail: format!("adjacency has {n} nodes, operand has {} rows", m.rows()),
        });
    }
    Ok(())
}

/// `out[u] = Σ_(u,v) value(u,v) · m[v]`.
pub fn spmm(s: &SparseAdj, m: &DenseMatrix) -> Result<DenseMatrix, NumError> {
    spmm_with(s, s.edge_values(), m)
}

/// Like [`spmm`] but with externally supplied per-entry weights.
pub fn spmm_with(s: &SparseAdj, weights: &[f64], m: &DenseMatrix) -> Result<DenseMatrix, NumError> {
    check_rows("spmm", s.n, m)?;
    if weights.len() != s.nnz() {
        return Err(NumError::Shape {
            op: "spmm",
            detail: format!("{} weights for {} stored entries", weights.len(), s.nnz()),
        });
    }
    let h = m.cols();
    let mut out = DenseMatrix::zeros(s.n, h);
    for u in 0..s.n {
        let out_row = out.row_mut(u);
        for e in s.row_offsets[u]..s.row_offsets[u + 1] {
            let w = weights[e];
            let src = m.row(s.col_indices[e]);
            for (o, x) in out_row.iter_mut().zip(src) {
                *o += w * x;
            }
        }
    }
    Ok(out)
}

/// Transposed product `out[v] = Σ_(u,v) weight(u,v) · g[u]`; the adjoint of
/// [`spmm_with`] with respect to its dense operand.
pub fn spmm_transpose_with(
    s: &SparseAdj,
    weights: &[f64],
    g: &DenseMatrix,
) -> Result<DenseMatrix, NumError> {
    check_rows("spmm_transpose", s.n, g)?;
    let h = g.cols();
    let mut out = DenseMatrix::zeros(s.n, h);
    for u in 0..s.n {
        let g_row = g.row(u);
        for e in s.row_offsets[u]..s.row_offsets[u + 1] {
            let w = weights[e];
            let dst = out.row_mut(s.col_indices[e]);
            for (o, x) in dst.iter_mut().zip(g_row) {
                *o += w * x;
            }
        }
    }
    Ok(out)
}
