//! The three attention mechanisms and the position-relevance weighting.
//!
//! C2A (coarse-to-aspect) scores every (context word, aspect word) pair,
//! softmaxes per context word over the aspect words, and averages those
//! distributions into one aspect-word weighting used to build the attended
//! aspect vector. C2F (coarse-to-fine) attends over context positions given
//! the aspect vector, feeds the result to an auxiliary category head, and
//! fuses it with the aspect vector through a sigmoid gate. PaS
//! (position-aware sentiment) attends over context positions with each
//! position's logit scaled by its relevance before the softmax.

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use crate::rng::Rng;
use crate::tape::{Tape, VarId};
use crate::tensor::{init_uniform, Tensor};

pub fn add_c2a_params(params: &mut ParamSet, d_h: usize, d_w: usize, rng: &mut Rng) {
    params.insert("c2a.w", init_uniform(vec![2 * d_h + d_w], rng));
    params.insert("c2a.b", init_uniform(vec![1], rng));
}

pub fn add_c2f_params(
    params: &mut ParamSet,
    d_h: usize,
    d_w: usize,
    d_u: usize,
    n_categories: usize,
    rng: &mut Rng,
) {
    params.insert("c2f.w_f", init_uniform(vec![d_u, 2 * d_h + d_w], rng));
    params.insert("c2f.b_f", init_uniform(vec![d_u], rng));
    params.insert("c2f.u_f", init_uniform(vec![d_u], rng));
    params.insert("c2f.w_gate", init_uniform(vec![d_w, 2 * d_h + d_w], rng));
    params.insert("c2f.b_gate", init_uniform(vec![d_w], rng));
    params.insert("c2f.w_proj", init_uniform(vec![d_w, 2 * d_h], rng));
    params.insert("c2f.w_aux", init_uniform(vec![n_categories, 2 * d_h], rng));
    params.insert("c2f.b_aux", init_uniform(vec![n_categories], rng));
}

pub fn add_pas_params(params: &mut ParamSet, d_h: usize, d_w: usize, d_u: usize, rng: &mut Rng) {
    params.insert("pas.w_o", init_uniform(vec![d_u, 2 * d_h + d_w], rng));
    params.insert("pas.b_o", init_uniform(vec![d_u], rng));
    params.insert("pas.u_o", init_uniform(vec![d_u], rng));
}

pub struct C2aOut {
    /// Pairwise alignment scores, [n x m].
    pub align: VarId,
    /// Aspect-word weighting, [m].
    pub alpha: VarId,
    /// Attended aspect vector, [d_w].
    pub h_a: VarId,
}

/// h: [n x 2*d_h] context states; e_a: [m x d_w] aspect word embeddings.
/// The score of pair (i, j) is tanh(w . [h_i; e_a_j] + b), computed via the
/// split w = [w_h; w_e] so no n*m concatenations are materialized.
pub fn c2a(
    tape: &mut Tape,
    bp: &BoundParams,
    h: VarId,
    e_a: VarId,
    ctx_mask: &[bool],
    asp_mask: &[bool],
) -> Result<C2aOut> {
    let two_dh = tape.value(h).cols();
    let d_w = tape.value(e_a).cols();
    let w = bp.get("c2a.w");
    let b = bp.get("c2a.b");
    let w_h = tape.slice(w, 0, two_dh)?;
    let w_e = tape.slice(w, two_dh, d_w)?;

    let s = tape.matvec(h, w_h)?;
    let t = tape.matvec(e_a, w_e)?;
    let pre = tape.outer_sum(s, t)?;
    let shifted = tape.add_scalar_broadcast(pre, b)?;
    let align = tape.tanh(shifted);

    let delta = tape.softmax_rows_masked(align, asp_mask)?;
    let alpha = tape.mean_rows_masked(delta, ctx_mask)?;
    let h_a = tape.vecmat(alpha, e_a)?;
    Ok(C2aOut { align, alpha, h_a })
}

/// Shared additive scorer: z_i = u . tanh(W [h_i; q] + b) for every context
/// position i, with the column split of W avoiding per-position concats.
fn attn_scores(
    tape: &mut Tape,
    bp: &BoundParams,
    w_name: &str,
    b_name: &str,
    u_name: &str,
    h: VarId,
    q: VarId,
) -> Result<VarId> {
    let two_dh = tape.value(h).cols();
    let q_dim = tape.value(q).len();
    let w = bp.get(w_name);
    let w_h = tape.slice_cols(w, 0, two_dh)?;
    let w_q = tape.slice_cols(w, two_dh, q_dim)?;

    let hw = tape.matmul_transb(h, w_h)?;
    let qc = tape.matvec(w_q, q)?;
    let shifted = tape.add_row_broadcast(hw, qc)?;
    let biased = tape.add_row_broadcast(shifted, bp.get(b_name))?;
    let act = tape.tanh(biased);
    tape.matvec(act, bp.get(u_name))
}

pub struct C2fOut {
    /// Context attention under the aspect vector, [n].
    pub beta: VarId,
    /// Attended context summary, [2*d_h].
    pub v_a: VarId,
    /// Category logits from the auxiliary head.
    pub aux_logits: VarId,
    /// Gated fusion of the aspect vector and the projected summary, [d_w].
    pub r_a: VarId,
}

pub fn c2f(
    tape: &mut Tape,
    bp: &BoundParams,
    h: VarId,
    h_a: VarId,
    ctx_mask: &[bool],
) -> Result<C2fOut> {
    let z = attn_scores(tape, bp, "c2f.w_f", "c2f.b_f", "c2f.u_f", h, h_a)?;
    let beta = tape.masked_softmax(z, ctx_mask)?;
    let v_a = tape.vecmat(beta, h)?;

    let aux_lin = tape.matvec(bp.get("c2f.w_aux"), v_a)?;
    let aux_logits = tape.add(aux_lin, bp.get("c2f.b_aux"))?;

    let gate_in = tape.concat(v_a, h_a)?;
    let gate_lin = tape.matvec(bp.get("c2f.w_gate"), gate_in)?;
    let gate_pre = tape.add(gate_lin, bp.get("c2f.b_gate"))?;
    let f = tape.sigmoid(gate_pre);

    let proj = tape.matvec(bp.get("c2f.w_proj"), v_a)?;
    let keep = tape.mul(f, h_a)?;
    let f_inv = tape.one_minus(f);
    let add_in = tape.mul(f_inv, proj)?;
    let r_a = tape.add(keep, add_in)?;

    Ok(C2fOut {
        beta,
        v_a,
        aux_logits,
        r_a,
    })
}

/// Position relevance for a sentence with a known aspect span. Indices are
/// 0-based at the boundary; internally the piecewise rule runs on 1-based
/// positions, converted in exactly one place here. With `literal_band` the
/// zero band covers span_len + 1 slots starting at the first aspect
/// position (kept as published); otherwise it covers exactly the aspect
/// positions and distances are measured from the last aspect word.
pub fn position_relevance_target(
    n: usize,
    span_start: usize,
    span_len: usize,
    literal_band: bool,
) -> Result<Tensor> {
    if n == 0 || span_len == 0 || span_start + span_len > n {
        return Err(Error::Validation(format!(
            "position relevance: span [{span_start}, {}) invalid for length {n}",
            span_start + span_len
        )));
    }
    let nf = n as f64;
    let first = span_start + 1; // 1-based index of the first aspect word
    let band_end = if literal_band {
        first + span_len
    } else {
        first + span_len - 1
    };
    let mut p = vec![0.0; n];
    for (idx, slot) in p.iter_mut().enumerate() {
        let i = idx + 1;
        *slot = if i < first {
            1.0 - (first - i) as f64 / nf
        } else if i <= band_end {
            0.0
        } else {
            1.0 - (i - band_end) as f64 / nf
        };
    }
    Ok(Tensor::vector(p))
}

/// Relevance for the coarse network, where no span exists: the attention
/// distribution from C2F is diffused by distance, p_i = sum_j
/// (1 - |i-j|/n) beta_j. Lives on the tape because gradients flow through
/// beta.
pub fn position_relevance_source(tape: &mut Tape, beta: VarId) -> Result<VarId> {
    tape.position_from_attention(beta)
}

/// Relevance input to PaS: a fixed vector for span-labeled sentences, a
/// tape node for the attention-derived source variant.
pub enum Relevance<'a> {
    Fixed(&'a Tensor),
    Learned(VarId),
}

pub struct PasOut {
    /// Final position-aware attention, [n].
    pub gamma: VarId,
    /// Sentence representation for classification and alignment, [2*d_h].
    pub v_o: VarId,
    /// The relevance actually used, as a tape node (constant when fixed).
    pub p: VarId,
}

pub fn pas(
    tape: &mut Tape,
    bp: &BoundParams,
    h: VarId,
    r_a: VarId,
    relevance: Relevance,
    ctx_mask: &[bool],
) -> Result<PasOut> {
    let z = attn_scores(tape, bp, "pas.w_o", "pas.b_o", "pas.u_o", h, r_a)?;
    let (logits, p) = match relevance {
        Relevance::Fixed(t) => {
            let p = tape.constant(t.clone());
            (tape.mul_const(z, t)?, p)
        }
        Relevance::Learned(p) => (tape.mul(p, z)?, p),
    };
    let gamma = tape.masked_softmax(logits, ctx_mask)?;
    let v_o = tape.vecmat(gamma, h)?;
    Ok(PasOut { gamma, v_o, p })
}
