//! Sentence encoder: embedding lookup with inverted dropout on context
//! words, and a bidirectional LSTM whose per-position output is the
//! concatenation [forward state; backward state].

use crate::error::Result;
use crate::params::{BoundParams, ParamSet};
use crate::rng::Rng;
use crate::tape::{Tape, VarId};
use crate::tensor::{init_uniform, Tensor};

/// Encoder parameter names, grouped under the prefixes used when copying
/// encoder state between networks. Gate order in the stacked LSTM weights is
/// input, forget, cell, output. All weights, biases included, use the same
/// small uniform init; hidden and cell states start at zero.
pub fn add_encoder_params(
    params: &mut ParamSet,
    vocab: usize,
    d_w: usize,
    d_h: usize,
    rng: &mut Rng,
) {
    params.insert("embedding", init_uniform(vec![vocab, d_w], rng));
    for half in ["lstm_fw", "lstm_bw"] {
        params.insert(
            &format!("{half}.w_ih"),
            init_uniform(vec![4 * d_h, d_w], rng),
        );
        params.insert(
            &format!("{half}.w_hh"),
            init_uniform(vec![4 * d_h, d_h], rng),
        );
        params.insert(&format!("{half}.b"), init_uniform(vec![4 * d_h], rng));
    }
}

/// Zero the padding row of an embedding table in place.
pub fn zero_pad_row(table: &mut Tensor) {
    let dim = table.cols();
    for j in 0..dim {
        table.data_mut()[crate::corpus::PAD_ID * dim + j] = 0.0;
    }
}

/// Embed token ids. With `dropout_rng` present, applies inverted dropout at
/// the given rate: each entry is kept with probability 1-rate and scaled by
/// 1/(1-rate), so the expectation over masks equals the undropped row.
/// Draws are row-major over the [n x d_w] output.
pub fn embed(
    tape: &mut Tape,
    table: VarId,
    ids: &[usize],
    dropout: Option<(f64, &mut Rng)>,
) -> Result<VarId> {
    let e = tape.embed_rows(table, ids)?;
    match dropout {
        Some((rate, rng)) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let n = tape.value(e).len();
            let mask: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.next_f64() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect();
            let shape = tape.value(e).shape().to_vec();
            let mask_t = Tensor::new(shape, mask)?;
            tape.mul_const(e, &mask_t)
        }
        _ => Ok(e),
    }
}

fn lstm_direction(
    tape: &mut Tape,
    bp: &BoundParams,
    prefix: &str,
    x: VarId,
    d_h: usize,
    order: impl Iterator<Item = usize>,
) -> Result<Vec<VarId>> {
    let w_ih = bp.get(&format!("{prefix}.w_ih"));
    let w_hh = bp.get(&format!("{prefix}.w_hh"));
    let b = bp.get(&format!("{prefix}.b"));

    let mut h = tape.constant(Tensor::zeros(vec![d_h]));
    let mut c = tape.constant(Tensor::zeros(vec![d_h]));
    let n = tape.value(x).rows();
    let mut out = vec![h; n];

    for t in order {
        let x_t = tape.row(x, t)?;
        let ih = tape.matvec(w_ih, x_t)?;
        let hh = tape.matvec(w_hh, h)?;
        let lin = tape.add(ih, hh)?;
        let pre = tape.add(lin, b)?;

        let i_pre = tape.slice(pre, 0, d_h)?;
        let f_pre = tape.slice(pre, d_h, d_h)?;
        let g_pre = tape.slice(pre, 2 * d_h, d_h)?;
        let o_pre = tape.slice(pre, 3 * d_h, d_h)?;
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);

        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        c = tape.add(fc, ig)?;
        let ct = tape.tanh(c);
        h = tape.mul(o, ct)?;
        out[t] = h;
    }
    Ok(out)
}

/// Run both directions over embedded inputs [n x d_w] and return the
/// per-position concatenated states as an [n x 2*d_h] matrix.
pub fn bilstm(tape: &mut Tape, bp: &BoundParams, x: VarId, d_h: usize) -> Result<VarId> {
    let n = tape.value(x).rows();
    let fw = lstm_direction(tape, bp, "lstm_fw", x, d_h, 0..n)?;
    let bw = lstm_direction(tape, bp, "lstm_bw", x, d_h, (0..n).rev())?;
    let rows: Vec<VarId> = (0..n)
        .map(|t| tape.concat(fw[t], bw[t]))
        .collect::<Result<_>>()?;
    tape.stack_rows(&rows)
}
