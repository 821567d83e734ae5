//! The two networks. The coarse-domain network encodes a sentence, runs
//! C2A over the aspect words, refines the aspect through C2F (whose
//! attention also feeds the auxiliary category head and the
//! attention-derived position relevance), then classifies through PaS. The
//! fine-domain network shares the same shape minus C2F: its aspect span is
//! explicit, so its relevance comes straight from token positions and its
//! aspect representation is the C2A output unchanged.

use crate::attention::{
    add_c2a_params, add_c2f_params, add_pas_params, c2a, c2f, pas, position_relevance_source,
    position_relevance_target, Relevance,
};
use crate::config::Hyperparams;
use crate::encoder::{add_encoder_params, bilstm, embed, zero_pad_row};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use crate::rng::Rng;
use crate::tape::{Tape, VarId};
use crate::tensor::init_uniform;

/// Parameter groups the fine-domain network inherits from the pretrained
/// coarse-domain network at stage-2 setup.
pub const SHARED_PREFIXES: &[&str] = &["embedding", "lstm_fw.", "lstm_bw.", "c2a.", "pas.", "cls."];

pub fn add_classifier_params(params: &mut ParamSet, d_h: usize, fc_dim: usize, rng: &mut Rng) {
    params.insert("cls.w_fc", init_uniform(vec![fc_dim, 2 * d_h], rng));
    params.insert("cls.b_fc", init_uniform(vec![fc_dim], rng));
    params.insert("cls.w_out", init_uniform(vec![3, fc_dim], rng));
    params.insert("cls.b_out", init_uniform(vec![3], rng));
}

/// logits = W_out tanh(W_fc v_o + b_fc) + b_out, one logit per sentiment.
pub fn sentiment_logits(tape: &mut Tape, bp: &BoundParams, v_o: VarId) -> Result<VarId> {
    let lin = tape.matvec(bp.get("cls.w_fc"), v_o)?;
    let pre = tape.add(lin, bp.get("cls.b_fc"))?;
    let act = tape.tanh(pre);
    let out = tape.matvec(bp.get("cls.w_out"), act)?;
    tape.add(out, bp.get("cls.b_out"))
}

#[derive(Debug)]
pub struct SourceNet {
    pub params: ParamSet,
    pub n_categories: usize,
}

impl SourceNet {
    pub fn new(hp: &Hyperparams, vocab_size: usize, n_categories: usize, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        add_encoder_params(&mut params, vocab_size, hp.d_w, hp.d_h, rng);
        add_c2a_params(&mut params, hp.d_h, hp.d_w, rng);
        add_c2f_params(&mut params, hp.d_h, hp.d_w, hp.d_u, n_categories, rng);
        add_pas_params(&mut params, hp.d_h, hp.d_w, hp.d_u, rng);
        add_classifier_params(&mut params, hp.d_h, hp.fc_dim, rng);
        zero_pad_row(params.get_mut("embedding"));
        SourceNet {
            params,
            n_categories,
        }
    }
}

#[derive(Debug)]
pub struct TargetNet {
    pub params: ParamSet,
}

impl TargetNet {
    pub fn new(hp: &Hyperparams, vocab_size: usize, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        add_encoder_params(&mut params, vocab_size, hp.d_w, hp.d_h, rng);
        add_c2a_params(&mut params, hp.d_h, hp.d_w, rng);
        add_pas_params(&mut params, hp.d_h, hp.d_w, hp.d_u, rng);
        add_classifier_params(&mut params, hp.d_h, hp.fc_dim, rng);
        zero_pad_row(params.get_mut("embedding"));
        TargetNet { params }
    }
}

/// Train mode draws dropout masks for context embeddings; eval mode is
/// deterministic and applies no dropout.
pub enum Mode<'a> {
    Train { dropout: f64, rng: &'a mut Rng },
    Eval,
}

fn ctx_dropout<'m>(mode: &'m mut Mode<'_>) -> Option<(f64, &'m mut Rng)> {
    match mode {
        Mode::Train { dropout, rng } if *dropout > 0.0 => Some((*dropout, &mut **rng)),
        _ => None,
    }
}

pub struct SourceForward {
    pub h: VarId,
    pub align: VarId,
    pub alpha: VarId,
    pub h_a: VarId,
    pub beta: VarId,
    pub v_a: VarId,
    pub aux_logits: VarId,
    pub r_a: VarId,
    pub p: VarId,
    pub gamma: VarId,
    pub v_o: VarId,
    pub sent_logits: VarId,
}

pub fn source_forward(
    tape: &mut Tape,
    bp: &BoundParams,
    hp: &Hyperparams,
    ctx_ids: &[usize],
    asp_ids: &[usize],
    mode: &mut Mode<'_>,
) -> Result<SourceForward> {
    if ctx_ids.is_empty() || asp_ids.is_empty() {
        return Err(Error::Validation(
            "forward pass needs a nonempty context and aspect".into(),
        ));
    }
    let emb = bp.get("embedding");
    let x = embed(tape, emb, ctx_ids, ctx_dropout(mode))?;
    let e_a = embed(tape, emb, asp_ids, None)?;
    let h = bilstm(tape, bp, x, hp.d_h)?;
    let ctx_mask = vec![true; ctx_ids.len()];
    let asp_mask = vec![true; asp_ids.len()];
    let a = c2a(tape, bp, h, e_a, &ctx_mask, &asp_mask)?;
    let f = c2f(tape, bp, h, a.h_a, &ctx_mask)?;
    let p = position_relevance_source(tape, f.beta)?;
    let o = pas(tape, bp, h, f.r_a, Relevance::Learned(p), &ctx_mask)?;
    let sent_logits = sentiment_logits(tape, bp, o.v_o)?;
    Ok(SourceForward {
        h,
        align: a.align,
        alpha: a.alpha,
        h_a: a.h_a,
        beta: f.beta,
        v_a: f.v_a,
        aux_logits: f.aux_logits,
        r_a: f.r_a,
        p: o.p,
        gamma: o.gamma,
        v_o: o.v_o,
        sent_logits,
    })
}

pub struct TargetForward {
    pub h: VarId,
    pub align: VarId,
    pub alpha: VarId,
    pub h_a: VarId,
    pub p: VarId,
    pub gamma: VarId,
    pub v_o: VarId,
    pub sent_logits: VarId,
}

/// The aspect words are the span tokens of the context itself.
pub fn target_forward(
    tape: &mut Tape,
    bp: &BoundParams,
    hp: &Hyperparams,
    ctx_ids: &[usize],
    span_start: usize,
    span_len: usize,
    literal_band: bool,
    mode: &mut Mode<'_>,
) -> Result<TargetForward> {
    let n = ctx_ids.len();
    if n == 0 {
        return Err(Error::Validation(
            "forward pass needs a nonempty context".into(),
        ));
    }
    let relevance = position_relevance_target(n, span_start, span_len, literal_band)?;
    let asp_ids = &ctx_ids[span_start..span_start + span_len];

    let emb = bp.get("embedding");
    let x = embed(tape, emb, ctx_ids, ctx_dropout(mode))?;
    let e_a = embed(tape, emb, asp_ids, None)?;
    let h = bilstm(tape, bp, x, hp.d_h)?;
    let ctx_mask = vec![true; n];
    let asp_mask = vec![true; span_len];
    let a = c2a(tape, bp, h, e_a, &ctx_mask, &asp_mask)?;
    // No C2F here: the aspect representation passes through unrefined.
    let o = pas(tape, bp, h, a.h_a, Relevance::Fixed(&relevance), &ctx_mask)?;
    let sent_logits = sentiment_logits(tape, bp, o.v_o)?;
    Ok(TargetForward {
        h,
        align: a.align,
        alpha: a.alpha,
        h_a: a.h_a,
        p: o.p,
        gamma: o.gamma,
        v_o: o.v_o,
        sent_logits,
    })
}
