use std::sync::Arc;

use crate::model::{EnvPosterior, ForwardOutput};
use crate::numcore::{DenseMatrix, NumError, Tape, Var};

use super::{Regularizer, TrainConfig};

/// `(1/L) Σ_l mean_{v ∈ rows} Σ_k e_vk (log π_vk + log K)`, differentiable
/// through both `e` and `log π`.
pub fn reg_term_mc(tape: &mut Tape, posterior: &EnvPosterior, rows: &Arc<[usize]>) -> Result<Var, NumError> {
    layer_mean(tape, posterior, rows, |l| (l.e, l.log_pi))
}

/// `(1/L) Σ_l mean_{v ∈ rows} Σ_k π_vk (log π_vk + log K)`.
pub fn kl_exact_term(tape: &mut Tape, posterior: &EnvPosterior, rows: &Arc<[usize]>) -> Result<Var, NumError> {
    layer_mean(tape, posterior, rows, |l| (l.pi, l.log_pi))
}

fn layer_mean(
    tape: &mut Tape,
    posterior: &EnvPosterior,
    rows: &Arc<[usize]>,
    pick: impl Fn(&crate::model::LayerPosterior) -> (Var, Var),
) -> Result<Var, NumError> {
    if posterior.layers.is_empty() {
        return Err(NumError::Argument("posterior without layers".into()));
    }
    let mut terms = Vec::with_capacity(posterior.layers.len());
    for layer in &posterior.layers {
        let (weight, log_pi) = pick(layer);
        let k = tape.value(log_pi).cols() as f64;
        let shifted = tape.add_scalar(log_pi, k.ln())?;
        let prod = tape.mul(weight, shifted)?;
        terms.push(tape.masked_row_mean(prod, rows)?);
    }
    let total = tape.add_all(&terms)?;
    tape.scale(total, 1.0 / posterior.layers.len() as f64)
}

/// Mean over rows of `Σ_k π_k log π_k + log K`, with `0·log 0 = 0`.
pub fn kl_exact(pi: &DenseMatrix) -> f64 {
    mc_term(pi, pi)
}

/// Mean over rows of `Σ_k e_k (log π_k + log K)`, with `0·log 0 = 0`.
pub fn mc_term(e: &DenseMatrix, pi: &DenseMatrix) -> f64 {
    let k = pi.cols() as f64;
    let total: f64 = (0..pi.rows())
        .map(|i| {
            e.row(i)
                .iter()
                .zip(pi.row(i))
                .map(|(&ek, &pk)| if ek == 0.0 { 0.0 } else { ek * (pk.ln() + k.ln()) })
                .sum::<f64>()
        })
        .sum();
    total / pi.rows() as f64
}

/// Handles of the loss and its parts.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub supervised: Var,
    /// Unweighted regularizer; `None` when it does not enter the loss.
    pub regularizer: Option<Var>,
}

/// Cross-entropy on `rows` plus `λ` times the configured regularizer.
pub fn total_loss(
    tape: &mut Tape,
    output: &ForwardOutput,
    labels: &Arc<[usize]>,
    rows: &Arc<[usize]>,
    cfg: &TrainConfig,
) -> Result<LossTerms, NumError> {
    let supervised = tape.cross_entropy(output.logits, labels, rows)?;
    let posterior = match &output.posterior {
        Some(p) if cfg.uses_regularizer() => p,
        _ => {
            return Ok(LossTerms {
                total: supervised,
                supervised,
                regularizer: None,
            })
        }
    };
    let reg = match cfg.regularizer {
        Regularizer::MonteCarlo => reg_term_mc(tape, posterior, rows)?,
        Regularizer::ExactKl => kl_exact_term(tape, posterior, rows)?,
    };
    let weighted = tape.scale(reg, cfg.lambda)?;
    let total = tape.add(supervised, weighted)?;
    Ok(LossTerms {
        total,
        supervised,
        regularizer: Some(reg),
    })
}
