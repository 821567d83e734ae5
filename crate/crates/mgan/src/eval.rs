//! Frozen-parameter evaluation: the 3-class confusion matrix with accuracy
//! and macro-F1, C2F localization against a planted-term manifest, and the
//! per-example attention trace export.

use serde::Serialize;
use std::path::Path;

use crate::config::Hyperparams;
use crate::corpus::{atomic_write, SourceExample, TargetExample, Vocab, SENTIMENTS};
use crate::error::{Error, Result};
use crate::model::{source_forward, target_forward, Mode, SourceNet, TargetNet};
use crate::tape::Tape;

/// Rows are gold labels, columns predictions, in sentiment order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Confusion {
    pub counts: [[usize; 3]; 3],
}

impl Confusion {
    pub fn record(&mut self, gold: usize, pred: usize) {
        self.counts[gold][pred] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let hits: usize = (0..3).map(|c| self.counts[c][c]).sum();
        hits as f64 / total as f64
    }

    /// Per-class F1 averaged over the fixed 3-class set; any 0/0 ratio
    /// (a class absent from both gold and predictions) counts as 0.
    pub fn macro_f1(&self) -> f64 {
        let mut sum = 0.0;
        for c in 0..3 {
            let tp = self.counts[c][c] as f64;
            let pred_c: f64 = (0..3).map(|g| self.counts[g][c] as f64).sum();
            let gold_c: f64 = (0..3).map(|p| self.counts[c][p] as f64).sum();
            let precision = if pred_c > 0.0 { tp / pred_c } else { 0.0 };
            let recall = if gold_c > 0.0 { tp / gold_c } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            sum += f1;
        }
        sum / 3.0
    }
}

/// First maximal entry wins, so ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    assert!(!xs.is_empty(), "argmax of an empty slice");
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax over plain values (no tape involvement).
pub fn softmax_probs(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

pub fn evaluate_source(
    net: &SourceNet,
    hp: &Hyperparams,
    examples: &[SourceExample],
    vocab: &Vocab,
) -> Result<(f64, f64)> {
    let mut confusion = Confusion::default();
    for ex in examples {
        let mut tape = Tape::new();
        let bp = net.params.bind(&mut tape);
        let ctx = vocab.encode(&ex.context);
        let asp = vocab.encode(&ex.aspect_words);
        let out = source_forward(&mut tape, &bp, hp, &ctx, &asp, &mut Mode::Eval)?;
        let pred = argmax(tape.value(out.sent_logits).data());
        confusion.record(ex.sentiment.index(), pred);
    }
    Ok((confusion.accuracy(), confusion.macro_f1()))
}

pub fn evaluate_target(
    net: &TargetNet,
    hp: &Hyperparams,
    examples: &[TargetExample],
    vocab: &Vocab,
    literal_band: bool,
) -> Result<(f64, f64)> {
    let mut confusion = Confusion::default();
    for ex in examples {
        let mut tape = Tape::new();
        let bp = net.params.bind(&mut tape);
        let ctx = vocab.encode(&ex.context);
        let out = target_forward(
            &mut tape,
            &bp,
            hp,
            &ctx,
            ex.span_start,
            ex.span_len,
            literal_band,
            &mut Mode::Eval,
        )?;
        let pred = argmax(tape.value(out.sent_logits).data());
        confusion.record(ex.sentiment.index(), pred);
    }
    Ok((confusion.accuracy(), confusion.macro_f1()))
}

/// Fraction of examples whose C2F attention peaks exactly at the planted
/// term position recorded in the manifest.
pub fn c2f_localization(
    net: &SourceNet,
    hp: &Hyperparams,
    examples: &[SourceExample],
    vocab: &Vocab,
    manifest: &[usize],
) -> Result<f64> {
    if manifest.len() != examples.len() {
        return Err(Error::Validation(format!(
            "manifest has {} entries for {} examples",
            manifest.len(),
            examples.len()
        )));
    }
    if examples.is_empty() {
        return Err(Error::Validation(
            "localization over an empty corpus".into(),
        ));
    }
    let mut hits = 0usize;
    for (ex, &planted) in examples.iter().zip(manifest) {
        let mut tape = Tape::new();
        let bp = net.params.bind(&mut tape);
        let ctx = vocab.encode(&ex.context);
        let asp = vocab.encode(&ex.aspect_words);
        let out = source_forward(&mut tape, &bp, hp, &ctx, &asp, &mut Mode::Eval)?;
        if argmax(tape.value(out.beta).data()) == planted {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Expected hit rate of a uniformly random single-position guess: the mean
/// of 1/n over the corpus.
pub fn chance_hit_rate(examples: &[SourceExample]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let sum: f64 = examples
        .iter()
        .map(|ex| 1.0 / ex.context.len() as f64)
        .sum();
    sum / examples.len() as f64
}

/// One exported record per example; `span` appears only for span-labeled
/// corpora and `beta` only for the network that has C2F.
#[derive(Debug, Serialize)]
pub struct TraceLine {
    pub tokens: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub span: Option<(usize, usize)>,
    pub alpha: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    pub gamma: Vec<f64>,
    pub p: Vec<f64>,
    pub prediction: String,
    pub gold: String,
    pub probabilities: Vec<f64>,
}

fn check_normalized(name: &str, xs: &[f64]) -> Result<()> {
    let sum: f64 = xs.iter().sum();
    if (sum - 1.0).abs() > 1e-10 {
        return Err(Error::Validation(format!(
            "{name} sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

pub fn trace_source(
    net: &SourceNet,
    hp: &Hyperparams,
    ex: &SourceExample,
    vocab: &Vocab,
) -> Result<TraceLine> {
    let mut tape = Tape::new();
    let bp = net.params.bind(&mut tape);
    let ctx = vocab.encode(&ex.context);
    let asp = vocab.encode(&ex.aspect_words);
    let out = source_forward(&mut tape, &bp, hp, &ctx, &asp, &mut Mode::Eval)?;
    let alpha = tape.value(out.alpha).data().to_vec();
    let beta = tape.value(out.beta).data().to_vec();
    let gamma = tape.value(out.gamma).data().to_vec();
    check_normalized("alpha", &alpha)?;
    check_normalized("beta", &beta)?;
    check_normalized("gamma", &gamma)?;
    let logits = tape.value(out.sent_logits).data();
    let probabilities = softmax_probs(logits);
    Ok(TraceLine {
        tokens: ex.context.clone(),
        span: None,
        alpha,
        beta: Some(beta),
        gamma,
        p: tape.value(out.p).data().to_vec(),
        prediction: SENTIMENTS[argmax(logits)].as_str().to_string(),
        gold: ex.sentiment.as_str().to_string(),
        probabilities,
    })
}

pub fn trace_target(
    net: &TargetNet,
    hp: &Hyperparams,
    ex: &TargetExample,
    vocab: &Vocab,
    literal_band: bool,
) -> Result<TraceLine> {
    let mut tape = Tape::new();
    let bp = net.params.bind(&mut tape);
    let ctx = vocab.encode(&ex.context);
    let out = target_forward(
        &mut tape,
        &bp,
        hp,
        &ctx,
        ex.span_start,
        ex.span_len,
        literal_band,
        &mut Mode::Eval,
    )?;
    let alpha = tape.value(out.alpha).data().to_vec();
    let gamma = tape.value(out.gamma).data().to_vec();
    check_normalized("alpha", &alpha)?;
    check_normalized("gamma", &gamma)?;
    let logits = tape.value(out.sent_logits).data();
    let probabilities = softmax_probs(logits);
    Ok(TraceLine {
        tokens: ex.context.clone(),
        span: Some((ex.span_start, ex.span_len)),
        alpha,
        beta: None,
        gamma,
        p: tape.value(out.p).data().to_vec(),
        prediction: SENTIMENTS[argmax(logits)].as_str().to_string(),
        gold: ex.sentiment.as_str().to_string(),
        probabilities,
    })
}

/// One JSON object per line.
pub fn write_traces(lines: &[TraceLine], path: &Path) -> Result<()> {
    let mut out = String::new();
    for line in lines {
        out.push_str(&serde_json::to_string(line).map_err(|e| Error::Validation(e.to_string()))?);
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}
