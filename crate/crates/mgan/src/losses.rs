//! Training objectives: per-batch cross-entropy means, the contrastive
//! alignment pulling same-sentiment sentence representations of the two
//! networks together while pushing different-sentiment pairs at least a
//! margin apart, the l2 penalty, and their weighted composition.

use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Squared distance for a same-label pair, hinge max(0, margin - distance)
/// for a different-label pair.
pub fn contrastive_omega(
    tape: &mut Tape,
    u: VarId,
    v: VarId,
    same_label: bool,
    margin: f64,
) -> Result<VarId> {
    let d = tape.sq_euclidean(u, v)?;
    if same_label {
        Ok(d)
    } else {
        tape.hinge_margin(d, margin)
    }
}

/// Mean of the contrastive terms over the full cross product of the two
/// batches' (representation, sentiment) pairs.
pub fn cfa_loss(
    tape: &mut Tape,
    source: &[(VarId, usize)],
    target: &[(VarId, usize)],
    margin: f64,
) -> Result<VarId> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Validation(
            "alignment loss needs a nonempty batch on both sides".into(),
        ));
    }
    let mut terms = Vec::with_capacity(source.len() * target.len());
    for &(u, yu) in source {
        for &(v, yv) in target {
            terms.push(contrastive_omega(tape, u, v, yu == yv, margin)?);
        }
    }
    tape.mean_scalars(&terms)
}

/// Mean cross-entropy over a batch of (logits, label) pairs.
pub fn batch_cross_entropy(tape: &mut Tape, items: &[(VarId, usize)]) -> Result<VarId> {
    if items.is_empty() {
        return Err(Error::Validation(
            "cross-entropy over an empty batch".into(),
        ));
    }
    let mut terms = Vec::with_capacity(items.len());
    for &(logits, label) in items {
        terms.push(tape.cross_entropy(logits, label)?);
    }
    tape.mean_scalars(&terms)
}

/// Sum of squared entries over every bound parameter except embedding
/// tables, which are excluded from the penalty.
pub fn l2_reg(tape: &mut Tape, bp: &BoundParams) -> Result<VarId> {
    let mut total: Option<VarId> = None;
    for (i, &id) in bp.ids().iter().enumerate() {
        if bp.set().name_at(i).contains("embedding") {
            continue;
        }
        let s = tape.sum_squares(id);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// l_sen + l_aux + lambda * l_cfa + rho * l_reg, with absent terms dropped.
/// A zero lambda skips the alignment term entirely so the optimized graph
/// is identical to one built without it.
pub fn composite_loss(
    tape: &mut Tape,
    l_sen: VarId,
    l_aux: Option<VarId>,
    l_cfa: Option<VarId>,
    lambda: f64,
    l_reg: VarId,
    rho: f64,
) -> Result<VarId> {
    let mut total = l_sen;
    if let Some(aux) = l_aux {
        total = tape.add(total, aux)?;
    }
    if let Some(cfa) = l_cfa {
        if lambda != 0.0 {
            let weighted = tape.scale(cfa, lambda);
            total = tape.add(total, weighted)?;
        }
    }
    let reg = tape.scale(l_reg, rho);
    tape.add(total, reg)
}
