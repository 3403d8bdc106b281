use std::sync::Arc;

use crate::numcore::{sample_gumbel, DenseMatrix, NumError, Rng, SparseAdj, Tape, Var};

/// Tape handles of one branch's weights.
#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    pub w_d: Var,
    pub w_self: Var,
    /// `(W_A, b)` with `b` stored as a 2H×1 column.
    pub attn: Option<(Var, Var)>,
}

/// What the Gumbel noise perturbs before the tempered softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GumbelMode {
    /// `softmax((π + g)/τ)`.
    Literal,
    /// `softmax((log π + g)/τ)`; argmax of `log π + g` is an exact sample
    /// from `π`.
    LogProb,
}

/// Branch probabilities `π = softmax(z · W_envᵀ)`, returned together with
/// `log π`.
pub fn env_probs(tape: &mut Tape, z: Var, w_env: Var) -> Result<(Var, Var), NumError> {
    let logits = tape.matmul_t(z, w_env)?;
    let pi = tape.row_softmax(logits)?;
    let log_pi = tape.row_log_softmax(logits)?;
    Ok((pi, log_pi))
}

/// Gumbel-Softmax relaxation of a draw from `π`.
///
/// With `rng = None` the noise is zero. The sampled noise is returned so the
/// caller can record it; on the tape it is a constant.
pub fn gumbel_sample(
    tape: &mut Tape,
    pi: Var,
    log_pi: Var,
    tau: f64,
    rng: Option<&mut Rng>,
    mode: GumbelMode,
) -> Result<(Var, Option<DenseMatrix>), NumError> {
    if !(tau > 0.0) {
        return Err(NumError::Argument(format!("temperature must be positive, got {tau}")));
    }
    let base = match mode {
        GumbelMode::Literal => pi,
        GumbelMode::LogProb => log_pi,
    };
    let (rows, cols) = tape.value(pi).shape();
    let (perturbed, noise) = match rng {
        Some(rng) => {
            let g = sample_gumbel(rng, rows, cols);
            let gv = tape.constant(g.clone())?;
            (tape.add(base, gv)?, Some(g))
        }
        None => (base, None),
    };
    let scaled = tape.scale(perturbed, 1.0 / tau)?;
    Ok((tape.row_softmax(scaled)?, noise))
}

/// `Σ_k e_k ⊙ [Â z W_Dᵏᵀ + z W_selfᵏᵀ]`, before the activation.
pub fn moe_gcn_preactivation(
    tape: &mut Tape,
    z: Var,
    adj: &Arc<SparseAdj>,
    e: Var,
    branches: &[BranchVars],
) -> Result<Var, NumError> {
    let mut gated = Vec::with_capacity(branches.len());
    for (k, b) in branches.iter().enumerate() {
        let zd = tape.matmul_t(z, b.w_d)?;
        let agg = tape.spmm(adj, zd)?;
        let zs = tape.matmul_t(z, b.w_self)?;
        let pre = tape.add(agg, zs)?;
        gated.push(tape.gate(pre, e, k)?);
    }
    tape.add_all(&gated)
}

/// Attention variant of [`moe_gcn_preactivation`]: per branch, neighbor
/// weights are a softmax over `𝒩_u ∪ {u}` of
/// `LeakyReLU(b₁ᵀ W_A z_u + b₂ᵀ W_A z_v)`.
pub fn moe_gat_preactivation(
    tape: &mut Tape,
    z: Var,
    structure: &Arc<SparseAdj>,
    e: Var,
    branches: &[BranchVars],
    slope: f64,
) -> Result<Var, NumError> {
    let h = tape.value(z).cols();
    let mut gated = Vec::with_capacity(branches.len());
    for (k, b) in branches.iter().enumerate() {
        let (w_a, bias) = b
            .attn
            .ok_or_else(|| NumError::Argument("attention branch without W_A/b".into()))?;
        let w = attention_weights(tape, z, w_a, bias, h, structure, slope)?;
        let zd = tape.matmul_t(z, b.w_d)?;
        let agg = tape.edge_aggregate(structure, w, zd)?;
        let zs = tape.matmul_t(z, b.w_self)?;
        let pre = tape.add(agg, zs)?;
        gated.push(tape.gate(pre, e, k)?);
    }
    tape.add_all(&gated)
}

fn attention_weights(
    tape: &mut Tape,
    z: Var,
    w_a: Var,
    bias: Var,
    h: usize,
    structure: &Arc<SparseAdj>,
    slope: f64,
) -> Result<Var, NumError> {
    let p = tape.matmul_t(z, w_a)?;
    let b_src = tape.row_slice(bias, 0, h)?;
    let b_dst = tape.row_slice(bias, h, h)?;
    let f = tape.matmul(p, b_src)?;
    let g = tape.matmul(p, b_dst)?;
    tape.edge_attention(f, g, structure, slope)
}

/// ReLU, dropout, then the residual link back to the layer input.
pub fn finish_layer(
    tape: &mut Tape,
    pre: Var,
    z: Var,
    dropout: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<Var, NumError> {
    let h = tape.relu(pre)?;
    let h = tape.dropout(h, dropout, rng, training)?;
    tape.add(h, z)
}

#[allow(clippy::too_many_arguments)]
pub fn moe_gcn_layer(
    tape: &mut Tape,
    z: Var,
    adj: &Arc<SparseAdj>,
    e: Var,
    branches: &[BranchVars],
    dropout: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<Var, NumError> {
    let pre = moe_gcn_preactivation(tape, z, adj, e, branches)?;
    finish_layer(tape, pre, z, dropout, rng, training)
}

#[allow(clippy::too_many_arguments)]
pub fn moe_gat_layer(
    tape: &mut Tape,
    z: Var,
    structure: &Arc<SparseAdj>,
    e: Var,
    branches: &[BranchVars],
    slope: f64,
    dropout: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<Var, NumError> {
    let pre = moe_gat_preactivation(tape, z, structure, e, branches, slope)?;
    finish_layer(tape, pre, z, dropout, rng, training)
}

/// Plain GCN layer `z + dropout(ReLU(Â z Wᵀ))`.
pub fn baseline_gcn_layer(
    tape: &mut Tape,
    z: Var,
    adj: &Arc<SparseAdj>,
    w: Var,
    dropout: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<Var, NumError> {
    let zw = tape.matmul_t(z, w)?;
    let pre = tape.spmm(adj, zw)?;
    finish_layer(tape, pre, z, dropout, rng, training)
}

/// Single-head GAT layer: messages `W z_v` weighted by a neighborhood
/// softmax of `LeakyReLU(a₁ᵀ W z_u + a₂ᵀ W z_v)`.
#[allow(clippy::too_many_arguments)]
pub fn baseline_gat_layer(
    tape: &mut Tape,
    z: Var,
    structure: &Arc<SparseAdj>,
    w: Var,
    a: Var,
    slope: f64,
    dropout: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<Var, NumError> {
    let h = tape.value(z).cols();
    let p = tape.matmul_t(z, w)?;
    let a_src = tape.row_slice(a, 0, h)?;
    let a_dst = tape.row_slice(a, h, h)?;
    let f = tape.matmul(p, a_src)?;
    let g = tape.matmul(p, a_dst)?;
    let att = tape.edge_attention(f, g, structure, slope)?;
    let pre = tape.edge_aggregate(structure, att, p)?;
    finish_layer(tape, pre, z, dropout, rng, training)
}
