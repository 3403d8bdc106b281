use std::sync::Arc;

use crate::metrics::accuracy;
use crate::numcore::{AdamConfig, AdamState, DenseMatrix, NumError, ParamStore, Rng, Tape};

/// Multinomial logistic regression `softmax(W [x ∥ 1])`, fit full-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    weights: DenseMatrix,
}

fn with_bias(x: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(x.rows(), x.cols() + 1, |i, j| if j < x.cols() { x.get(i, j) } else { 1.0 })
}

impl LinearProbe {
    pub fn fit(x: &DenseMatrix, labels: &[usize], classes: usize, steps: usize, rng: &Rng) -> Result<Self, NumError> {
        let xb = with_bias(x);
        let mut store = ParamStore::new();
        let std = (1.0 / xb.cols() as f64).sqrt();
        let w = store.add("probe", rng.clone().gaussian_matrix(classes, xb.cols(), std));
        let labels: Arc<[usize]> = labels.into();
        let rows: Arc<[usize]> = (0..xb.rows()).collect();
        let cfg = AdamConfig {
            lr: 0.05,
            ..Default::default()
        };
        let mut state = AdamState::new(&store);
        for _ in 0..steps {
            let mut tape = Tape::new();
            let xv = tape.constant(xb.clone())?;
            let wv = tape.param(&store, w)?;
            let logits = tape.matmul_t(xv, wv)?;
            let loss = tape.cross_entropy(logits, &labels, &rows)?;
            let grads = tape.backward(loss, &store)?;
            state.step(&mut store, &grads, &cfg)?;
        }
        Ok(Self {
            weights: store.get(w).clone(),
        })
    }

    pub fn predict(&self, x: &DenseMatrix) -> Result<Vec<usize>, NumError> {
        Ok(with_bias(x).matmul_t(&self.weights)?.argmax_rows())
    }

    pub fn accuracy(&self, x: &DenseMatrix, labels: &[usize]) -> Result<f64, NumError> {
        let pred = self.predict(x)?;
        accuracy(&pred, labels).map_err(|e| NumError::Argument(e.to_string()))
    }
}
