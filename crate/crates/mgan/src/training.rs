//! The two-stage protocol. Stage 1 pretrains the coarse network on its
//! sentiment and auxiliary category losses. Stage 2 initializes the
//! fine-domain network from the pretrained one and alternates a coarse step
//! with a fine step, coupling the two through the contrastive alignment;
//! each step backpropagates only into the network being stepped unless
//! joint flow is explicitly enabled. Includes Adam, global-norm clipping,
//! early stopping, the training log, and the checkpoint container.

use std::collections::VecDeque;
use std::path::Path;

use crate::config::{Hyperparams, RunConfig};
use crate::corpus::{
    atomic_write, batches_source, batches_target, Batch, SourceExample, TargetExample, Vocab,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_source, evaluate_target};
use crate::losses::{batch_cross_entropy, cfa_loss, composite_loss, l2_reg};
use crate::model::{source_forward, target_forward, Mode, SourceNet, TargetNet, SHARED_PREFIXES};
use crate::params::{copy_by_prefix, BoundParams, ParamSet};
use crate::rng::Rng;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamSet) -> Adam {
        let m: Vec<Tensor> = params
            .tensors()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        let v = m.clone();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Validation(format!(
                "optimizer holds {} moment slots but got {} gradients",
                self.m.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..grads.len() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.tensor_at_mut(i).data_mut();
            if g.len() != p.len() {
                return Err(Error::Validation(format!(
                    "gradient {} has {} entries for {} parameters",
                    i,
                    g.len(),
                    p.len()
                )));
            }
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> AdamSnapshot {
        AdamSnapshot {
            t: self.t,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn restore(lr: f64, snap: &AdamSnapshot) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: snap.t,
            m: snap.m.clone(),
            v: snap.v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamSnapshot {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// Rescales all gradients by max_norm/norm when the global l2 norm exceeds
/// max_norm; a norm exactly at the ceiling passes through untouched.
/// Returns the pre-clip norm.
pub fn clip_gradients(params: &ParamSet, grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for (i, g) in grads.iter().enumerate() {
        if !g.all_finite() {
            return Err(Error::Domain(format!(
                "non-finite gradient for parameter {}",
                params.name_at(i)
            )));
        }
        sq += g.data().iter().map(|x| x * x).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= k;
            }
        }
    }
    Ok(norm)
}

struct BatchTerms {
    sen: Vec<(VarId, usize)>,
    aux: Vec<(VarId, usize)>,
    /// (sentence representation, sentiment) pairs for the alignment loss.
    reps: Vec<(VarId, usize)>,
}

fn forward_source_batch(
    tape: &mut Tape,
    bp: &BoundParams,
    hp: &Hyperparams,
    batch: &Batch,
    mode: &mut Mode<'_>,
) -> Result<BatchTerms> {
    let categories = batch
        .category_ids
        .as_ref()
        .ok_or_else(|| Error::Validation("source batch lacks category labels".into()))?;
    let mut terms = BatchTerms {
        sen: Vec::with_capacity(batch.len()),
        aux: Vec::with_capacity(batch.len()),
        reps: Vec::with_capacity(batch.len()),
    };
    for i in 0..batch.len() {
        let out = source_forward(tape, bp, hp, batch.context_of(i), batch.aspect_of(i), mode)?;
        let y = batch.sentiments[i].index();
        terms.sen.push((out.sent_logits, y));
        terms.aux.push((out.aux_logits, categories[i]));
        terms.reps.push((out.v_o, y));
    }
    Ok(terms)
}

fn forward_target_batch(
    tape: &mut Tape,
    bp: &BoundParams,
    hp: &Hyperparams,
    batch: &Batch,
    literal_band: bool,
    mode: &mut Mode<'_>,
) -> Result<BatchTerms> {
    let spans = batch
        .spans
        .as_ref()
        .ok_or_else(|| Error::Validation("target batch lacks aspect spans".into()))?;
    let mut terms = BatchTerms {
        sen: Vec::with_capacity(batch.len()),
        aux: Vec::new(),
        reps: Vec::with_capacity(batch.len()),
    };
    for i in 0..batch.len() {
        let (start, len) = spans[i];
        let out = target_forward(
            tape,
            bp,
            hp,
            batch.context_of(i),
            start,
            len,
            literal_band,
            mode,
        )?;
        let y = batch.sentiments[i].index();
        terms.sen.push((out.sent_logits, y));
        terms.reps.push((out.v_o, y));
    }
    Ok(terms)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StepStats {
    pub l_sen: f64,
    pub l_aux: f64,
    pub l_cfa: f64,
    pub l_reg: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// The frozen counterpart network during an alternating step. Its forward
/// runs in eval mode. With `adam` absent its representations enter the
/// alignment loss as constants (gradient isolation); with `adam` present
/// the alignment gradients also step this network (joint flow).
pub struct FrozenSide<'a, N> {
    pub net: &'a mut N,
    pub adam: Option<&'a mut Adam>,
    pub batch: &'a Batch,
    pub lambda: f64,
}

/// One Adam step of the coarse network on one batch. `frozen` adds the
/// alignment term against the fine network; None is the stage-1 objective.
pub fn source_step(
    g_s: &mut SourceNet,
    adam_s: &mut Adam,
    hp: &Hyperparams,
    batch: &Batch,
    drop_rng: &mut Rng,
    mut frozen: Option<FrozenSide<'_, TargetNet>>,
    literal_band: bool,
) -> Result<StepStats> {
    let (mut stats, mut grads_own, frozen_grads) = {
        let mut tape = Tape::new();
        let bs = g_s.params.bind(&mut tape);
        let mut mode = Mode::Train {
            dropout: hp.dropout,
            rng: drop_rng,
        };
        let src = forward_source_batch(&mut tape, &bs, hp, batch, &mut mode)?;
        let l_sen = batch_cross_entropy(&mut tape, &src.sen)?;
        let l_aux = batch_cross_entropy(&mut tape, &src.aux)?;
        let l_reg = l2_reg(&mut tape, &bs)?;

        let mut l_cfa = None;
        let mut lambda = 0.0;
        let mut bt = None;
        if let Some(f) = &mut frozen {
            let bound = f.net.params.bind(&mut tape);
            let tgt = forward_target_batch(
                &mut tape,
                &bound,
                hp,
                f.batch,
                literal_band,
                &mut Mode::Eval,
            )?;
            let reps: Vec<(VarId, usize)> = if f.adam.is_none() {
                tgt.reps
                    .iter()
                    .map(|&(id, y)| (tape.detach(id), y))
                    .collect()
            } else {
                tgt.reps
            };
            l_cfa = Some(cfa_loss(&mut tape, &src.reps, &reps, hp.margin)?);
            lambda = f.lambda;
            bt = Some(bound);
        }

        let total = composite_loss(&mut tape, l_sen, Some(l_aux), l_cfa, lambda, l_reg, hp.rho)?;
        let grads = tape.backward(total)?;
        let stats = StepStats {
            l_sen: tape.item(l_sen),
            l_aux: tape.item(l_aux),
            l_cfa: l_cfa.map(|c| tape.item(c)).unwrap_or(0.0),
            l_reg: tape.item(l_reg),
            total: tape.item(total),
            grad_norm: 0.0,
        };
        let own = bs.collect_grads(&grads);
        let other = bt.map(|b| b.collect_grads(&grads));
        (stats, own, other)
    };
    stats.grad_norm = clip_gradients(&g_s.params, &mut grads_own, hp.clip_norm)?;
    adam_s.step(&mut g_s.params, &grads_own)?;
    if let Some(f) = frozen {
        if let (Some(adam_t), Some(mut gt)) = (f.adam, frozen_grads) {
            clip_gradients(&f.net.params, &mut gt, hp.clip_norm)?;
            adam_t.step(&mut f.net.params, &gt)?;
        }
    }
    Ok(stats)
}

/// One Adam step of the fine network on one batch; symmetric to
/// source_step but without the auxiliary term.
pub fn target_step(
    g_t: &mut TargetNet,
    adam_t: &mut Adam,
    hp: &Hyperparams,
    batch: &Batch,
    drop_rng: &mut Rng,
    mut frozen: Option<FrozenSide<'_, SourceNet>>,
    literal_band: bool,
) -> Result<StepStats> {
    let (mut stats, mut grads_own, frozen_grads) = {
        let mut tape = Tape::new();
        let bt = g_t.params.bind(&mut tape);
        let mut mode = Mode::Train {
            dropout: hp.dropout,
            rng: drop_rng,
        };
        let tgt = forward_target_batch(&mut tape, &bt, hp, batch, literal_band, &mut mode)?;
        let l_sen = batch_cross_entropy(&mut tape, &tgt.sen)?;
        let l_reg = l2_reg(&mut tape, &bt)?;

        let mut l_cfa = None;
        let mut lambda = 0.0;
        let mut bs = None;
        if let Some(f) = &mut frozen {
            let bound = f.net.params.bind(&mut tape);
            let src = forward_source_batch(&mut tape, &bound, hp, f.batch, &mut Mode::Eval)?;
            let reps: Vec<(VarId, usize)> = if f.adam.is_none() {
                src.reps
                    .iter()
                    .map(|&(id, y)| (tape.detach(id), y))
                    .collect()
            } else {
                src.reps
            };
            l_cfa = Some(cfa_loss(&mut tape, &reps, &tgt.reps, hp.margin)?);
            lambda = f.lambda;
            bs = Some(bound);
        }

        let total = composite_loss(&mut tape, l_sen, None, l_cfa, lambda, l_reg, hp.rho)?;
        let grads = tape.backward(total)?;
        let stats = StepStats {
            l_sen: tape.item(l_sen),
            l_aux: 0.0,
            l_cfa: l_cfa.map(|c| tape.item(c)).unwrap_or(0.0),
            l_reg: tape.item(l_reg),
            total: tape.item(total),
            grad_norm: 0.0,
        };
        let own = bt.collect_grads(&grads);
        let other = bs.map(|b| b.collect_grads(&grads));
        (stats, own, other)
    };
    stats.grad_norm = clip_gradients(&g_t.params, &mut grads_own, hp.clip_norm)?;
    adam_t.step(&mut g_t.params, &grads_own)?;
    if let Some(f) = frozen {
        if let (Some(adam_s), Some(mut gs)) = (f.adam, frozen_grads) {
            clip_gradients(&f.net.params, &mut gs, hp.clip_norm)?;
            adam_s.step(&mut f.net.params, &gs)?;
        }
    }
    Ok(stats)
}

/// One record per validation pass. In stage 2 the loss fields are window
/// means since the previous record: l_aux comes from the coarse steps,
/// the other losses from the fine steps being validated.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRecord {
    pub step: u64,
    pub l_sen: f64,
    pub l_aux: f64,
    pub l_cfa: f64,
    pub l_reg: f64,
    pub val_acc: f64,
    pub val_f1: f64,
}

pub fn render_log(records: &[TrainLogRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&format!(
            "step={} l_sen={} l_aux={} l_cfa={} l_reg={} val_acc={} val_f1={}\n",
            r.step, r.l_sen, r.l_aux, r.l_cfa, r.l_reg, r.val_acc, r.val_f1
        ));
    }
    s
}

pub fn write_log(records: &[TrainLogRecord], path: &Path) -> Result<()> {
    atomic_write(path, render_log(records).as_bytes())
}

struct EarlyStop {
    best: f64,
    stale: usize,
    patience: usize,
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        EarlyStop {
            best: f64::NEG_INFINITY,
            stale: 0,
            patience,
        }
    }

    /// Strict improvement resets the counter and reports true.
    fn observe(&mut self, v: f64) -> bool {
        if v > self.best {
            self.best = v;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    fn exhausted(&self) -> bool {
        self.stale >= self.patience
    }
}

/// Shuffled (train, validation) index split; the validation side gets the
/// rounded fraction, at least 1 and at most n-1.
pub fn split_indices(
    n: usize,
    val_fraction: f64,
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Validation(
            "need at least 2 examples to hold out validation data".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let (val, train) = idx.split_at(n_val);
    Ok((train.to_vec(), val.to_vec()))
}

#[derive(Debug)]
pub struct PretrainOutcome {
    /// Best-validation parameters.
    pub net: SourceNet,
    pub log: Vec<TrainLogRecord>,
    pub best_val_acc: f64,
    /// Parameters after the last step, regardless of validation.
    pub final_params: ParamSet,
}

/// Stage 1: epochs of shuffled batches over the coarse corpus, one
/// validation pass per epoch, early stopping on validation accuracy.
pub fn pretrain_source(
    categories: &[String],
    examples: &[SourceExample],
    vocab: &Vocab,
    cfg: &RunConfig,
    embedding: Option<Tensor>,
) -> Result<PretrainOutcome> {
    if examples.is_empty() {
        return Err(Error::Config {
            key: "source_train".into(),
            msg: "corpus is empty".into(),
        });
    }
    if categories.is_empty() {
        return Err(Error::Config {
            key: "source_train".into(),
            msg: "corpus declares no categories".into(),
        });
    }
    let hp = &cfg.hp;
    let mut init_rng = Rng::derive(cfg.seed, "init/source");
    let mut net = SourceNet::new(hp, vocab.len(), categories.len(), &mut init_rng);
    if let Some(table) = embedding {
        if table.shape() != [vocab.len(), hp.d_w] {
            return Err(Error::Config {
                key: "embeddings".into(),
                msg: format!(
                    "table is {:?}, expected [{}, {}]",
                    table.shape(),
                    vocab.len(),
                    hp.d_w
                ),
            });
        }
        net.params.set("embedding", table);
    }

    let mut split_rng = Rng::derive(cfg.seed, "split/source");
    let (train_idx, val_idx) = split_indices(examples.len(), cfg.val_fraction, &mut split_rng)?;
    let train: Vec<SourceExample> = train_idx.iter().map(|&i| examples[i].clone()).collect();
    let val: Vec<SourceExample> = val_idx.iter().map(|&i| examples[i].clone()).collect();

    let mut adam = Adam::new(hp.learning_rate, &net.params);
    let mut batch_rng = Rng::derive(cfg.seed, "batch/source/stage1");
    let mut drop_rng = Rng::derive(cfg.seed, "dropout/source/stage1");
    let mut stop = EarlyStop::new(cfg.patience);
    let mut best_params = net.params.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut log = Vec::new();
    let mut step: u64 = 0;

    for _ in 0..cfg.max_epochs {
        let batches = batches_source(&train, vocab, hp.batch_source, &mut batch_rng, true)?;
        let mut sums = StepStats::default();
        let mut count = 0usize;
        for b in &batches {
            let st = source_step(
                &mut net,
                &mut adam,
                hp,
                b,
                &mut drop_rng,
                None,
                cfg.literal_position_band,
            )?;
            if !st.total.is_finite() {
                return Err(Error::Validation(format!(
                    "loss became non-finite at step {step}"
                )));
            }
            step += 1;
            count += 1;
            sums.l_sen += st.l_sen;
            sums.l_aux += st.l_aux;
            sums.l_reg += st.l_reg;
        }
        let (acc, f1) = evaluate_source(&net, hp, &val, vocab)?;
        log.push(TrainLogRecord {
            step,
            l_sen: sums.l_sen / count as f64,
            l_aux: sums.l_aux / count as f64,
            l_cfa: 0.0,
            l_reg: sums.l_reg / count as f64,
            val_acc: acc,
            val_f1: f1,
        });
        if stop.observe(acc) {
            best_params = net.params.clone();
            best_acc = acc;
        }
        if stop.exhausted() {
            break;
        }
    }

    let final_params = net.params.clone();
    net.params = best_params;
    Ok(PretrainOutcome {
        net,
        log,
        best_val_acc: best_acc,
        final_params,
    })
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    /// Best-validation parameters.
    pub net: TargetNet,
    pub log: Vec<TrainLogRecord>,
    pub best_val_acc: f64,
    /// Parameters after the last step, regardless of validation.
    pub final_params: ParamSet,
}

/// Trains the fine network on its own loss alone: the no-transfer baseline,
/// and exactly the fine half of the alternating stage when lambda is 0.
pub fn train_target_only(
    mut net: TargetNet,
    train: &[TargetExample],
    val: &[TargetExample],
    vocab: &Vocab,
    cfg: &RunConfig,
) -> Result<FinetuneOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config {
            key: "target_train".into(),
            msg: "corpus is empty".into(),
        });
    }
    let hp = &cfg.hp;
    let mut adam = Adam::new(hp.learning_rate, &net.params);
    let mut batch_rng = Rng::derive(cfg.seed, "batch/target");
    let mut drop_rng = Rng::derive(cfg.seed, "dropout/target");
    let mut stop = EarlyStop::new(cfg.patience);
    let mut best_params = net.params.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut log = Vec::new();
    let mut step: u64 = 0;

    for _ in 0..cfg.max_epochs {
        let batches = batches_target(train, vocab, hp.batch_target, &mut batch_rng, true)?;
        let mut sums = StepStats::default();
        let mut count = 0usize;
        for b in &batches {
            let st = target_step(
                &mut net,
                &mut adam,
                hp,
                b,
                &mut drop_rng,
                None,
                cfg.literal_position_band,
            )?;
            if !st.total.is_finite() {
                return Err(Error::Validation(format!(
                    "loss became non-finite at step {step}"
                )));
            }
            step += 1;
            count += 1;
            sums.l_sen += st.l_sen;
            sums.l_reg += st.l_reg;
        }
        let (acc, f1) = evaluate_target(&net, hp, val, vocab, cfg.literal_position_band)?;
        log.push(TrainLogRecord {
            step,
            l_sen: sums.l_sen / count as f64,
            l_aux: 0.0,
            l_cfa: 0.0,
            l_reg: sums.l_reg / count as f64,
            val_acc: acc,
            val_f1: f1,
        });
        if stop.observe(acc) {
            best_params = net.params.clone();
            best_acc = acc;
        }
        if stop.exhausted() {
            break;
        }
    }

    let final_params = net.params.clone();
    net.params = best_params;
    Ok(FinetuneOutcome {
        net,
        log,
        best_val_acc: best_acc,
        final_params,
    })
}

/// Fresh fine network carrying over every shared parameter group from the
/// pretrained coarse network bit-exactly.
pub fn init_target_from_source(
    g_s: &SourceNet,
    hp: &Hyperparams,
    vocab_size: usize,
    seed: u64,
) -> Result<TargetNet> {
    let mut rng = Rng::derive(seed, "init/target");
    let mut net = TargetNet::new(hp, vocab_size, &mut rng);
    copy_by_prefix(&g_s.params, &mut net.params, SHARED_PREFIXES)?;
    Ok(net)
}

struct SourceFeed<'a> {
    examples: &'a [SourceExample],
    vocab: &'a Vocab,
    batch_size: usize,
    rng: Rng,
    queue: VecDeque<Batch>,
}

impl SourceFeed<'_> {
    fn next(&mut self) -> Result<Batch> {
        if self.queue.is_empty() {
            self.queue.extend(batches_source(
                self.examples,
                self.vocab,
                self.batch_size,
                &mut self.rng,
                true,
            )?);
        }
        Ok(self
            .queue
            .pop_front()
            .expect("nonempty corpus yields batches"))
    }
}

struct TargetFeed<'a> {
    examples: &'a [TargetExample],
    vocab: &'a Vocab,
    batch_size: usize,
    rng: Rng,
    queue: VecDeque<Batch>,
}

impl TargetFeed<'_> {
    fn next(&mut self) -> Result<Batch> {
        if self.queue.is_empty() {
            self.queue.extend(batches_target(
                self.examples,
                self.vocab,
                self.batch_size,
                &mut self.rng,
                true,
            )?);
        }
        Ok(self
            .queue
            .pop_front()
            .expect("nonempty corpus yields batches"))
    }
}

#[derive(Debug)]
pub struct AlternatingOutcome {
    pub g_s: SourceNet,
    /// Best-validation fine network.
    pub g_t: TargetNet,
    pub log: Vec<TrainLogRecord>,
    pub best_val_acc: f64,
    /// Fine parameters after the last step, regardless of validation.
    pub final_target_params: ParamSet,
}

/// Stage 2. Each iteration draws a coarse and a fine batch and steps the
/// coarse network, then draws fresh batches and steps the fine one; the
/// coarse corpus recycles independently of fine epochs. Validation runs on
/// the fine network every eval_every iterations.
pub fn alternating_train(
    mut g_s: SourceNet,
    mut g_t: TargetNet,
    source_examples: &[SourceExample],
    target_train: &[TargetExample],
    target_val: &[TargetExample],
    vocab: &Vocab,
    cfg: &RunConfig,
) -> Result<AlternatingOutcome> {
    if source_examples.is_empty() {
        return Err(Error::Config {
            key: "source_train".into(),
            msg: "corpus is empty".into(),
        });
    }
    if target_train.is_empty() || target_val.is_empty() {
        return Err(Error::Config {
            key: "target_train".into(),
            msg: "corpus is empty".into(),
        });
    }
    let hp = &cfg.hp;
    let lambda = hp.lambda;
    let band = cfg.literal_position_band;
    let joint = !cfg.cfa_gradient_isolation;

    let mut adam_s = Adam::new(hp.learning_rate, &g_s.params);
    let mut adam_t = Adam::new(hp.learning_rate, &g_t.params);
    let mut source_feed = SourceFeed {
        examples: source_examples,
        vocab,
        batch_size: hp.batch_source,
        rng: Rng::derive(cfg.seed, "batch/source/stage2"),
        queue: VecDeque::new(),
    };
    let mut target_feed = TargetFeed {
        examples: target_train,
        vocab,
        batch_size: hp.batch_target,
        rng: Rng::derive(cfg.seed, "batch/target"),
        queue: VecDeque::new(),
    };
    let mut s_drop = Rng::derive(cfg.seed, "dropout/source/stage2");
    let mut t_drop = Rng::derive(cfg.seed, "dropout/target");

    let mut stop = EarlyStop::new(cfg.patience);
    let mut best_params = g_t.params.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut log = Vec::new();
    let mut window = StepStats::default();
    let mut window_n = 0usize;

    for it in 1..=cfg.max_steps as u64 {
        let sb = source_feed.next()?;
        let st_s = if lambda > 0.0 {
            let tb = target_feed.next()?;
            source_step(
                &mut g_s,
                &mut adam_s,
                hp,
                &sb,
                &mut s_drop,
                Some(FrozenSide {
                    net: &mut g_t,
                    adam: if joint { Some(&mut adam_t) } else { None },
                    batch: &tb,
                    lambda,
                }),
                band,
            )?
        } else {
            source_step(&mut g_s, &mut adam_s, hp, &sb, &mut s_drop, None, band)?
        };

        let tb2 = target_feed.next()?;
        let st_t = if lambda > 0.0 {
            let sb2 = source_feed.next()?;
            target_step(
                &mut g_t,
                &mut adam_t,
                hp,
                &tb2,
                &mut t_drop,
                Some(FrozenSide {
                    net: &mut g_s,
                    adam: if joint { Some(&mut adam_s) } else { None },
                    batch: &sb2,
                    lambda,
                }),
                band,
            )?
        } else {
            target_step(&mut g_t, &mut adam_t, hp, &tb2, &mut t_drop, None, band)?
        };

        if !st_s.total.is_finite() || !st_t.total.is_finite() {
            return Err(Error::Validation(format!(
                "loss became non-finite at iteration {it}"
            )));
        }
        window.l_sen += st_t.l_sen;
        window.l_aux += st_s.l_aux;
        window.l_cfa += st_t.l_cfa;
        window.l_reg += st_t.l_reg;
        window_n += 1;

        if it % cfg.eval_every as u64 == 0 {
            let (acc, f1) = evaluate_target(&g_t, hp, target_val, vocab, band)?;
            log.push(TrainLogRecord {
                step: it,
                l_sen: window.l_sen / window_n as f64,
                l_aux: window.l_aux / window_n as f64,
                l_cfa: window.l_cfa / window_n as f64,
                l_reg: window.l_reg / window_n as f64,
                val_acc: acc,
                val_f1: f1,
            });
            window = StepStats::default();
            window_n = 0;
            if stop.observe(acc) {
                best_params = g_t.params.clone();
                best_acc = acc;
            }
            if stop.exhausted() {
                break;
            }
        }
    }

    let final_target_params = g_t.params.clone();
    g_t.params = best_params;
    Ok(AlternatingOutcome {
        g_s,
        g_t,
        log,
        best_val_acc: best_acc,
        final_target_params,
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MGANCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkBlock {
    pub name: String,
    pub params: ParamSet,
    pub opt: Option<AdamSnapshot>,
}

/// Self-contained training state: hyperparameters, the exact vocabulary,
/// and each network's parameters (optionally with optimizer moments).
/// Round-trips bit-exactly.
#[derive(Debug)]
pub struct Checkpoint {
    pub hp: Hyperparams,
    pub literal_position_band: bool,
    pub n_categories: usize,
    pub vocab: Vocab,
    pub networks: Vec<NetworkBlock>,
}

impl Checkpoint {
    pub fn network(&self, name: &str) -> Option<&NetworkBlock> {
        self.networks.iter().find(|b| b.name == name)
    }
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(buf: &mut Vec<u8>, s: &[u8]) {
    put_u64(buf, s.len() as u64);
    buf.extend_from_slice(s);
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    put_u64(buf, t.shape().len() as u64);
    for &d in t.shape() {
        put_u64(buf, d as u64);
    }
    for &x in t.data() {
        put_f64(buf, x);
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let hp = &ck.hp;
    for v in [
        hp.d_w,
        hp.d_h,
        hp.d_u,
        hp.fc_dim,
        hp.batch_source,
        hp.batch_target,
    ] {
        put_u64(&mut buf, v as u64);
    }
    for v in [
        hp.lambda,
        hp.rho,
        hp.margin,
        hp.learning_rate,
        hp.clip_norm,
        hp.dropout,
    ] {
        put_f64(&mut buf, v);
    }
    buf.push(ck.literal_position_band as u8);
    put_u64(&mut buf, ck.n_categories as u64);
    put_u64(&mut buf, ck.vocab.hash());
    put_u64(&mut buf, ck.vocab.len() as u64);
    for token in ck.vocab.tokens() {
        put_bytes(&mut buf, token.as_bytes());
    }
    put_u64(&mut buf, ck.networks.len() as u64);
    for block in &ck.networks {
        put_bytes(&mut buf, block.name.as_bytes());
        match &block.opt {
            Some(snap) => {
                buf.push(1);
                put_u64(&mut buf, snap.t);
            }
            None => buf.push(0),
        }
        put_u64(&mut buf, block.params.len() as u64);
        for (name, t) in block.params.iter() {
            put_bytes(&mut buf, name.as_bytes());
            put_tensor(&mut buf, t);
        }
        if let Some(snap) = &block.opt {
            for t in &snap.m {
                put_tensor(&mut buf, t);
            }
            for t in &snap.v {
                put_tensor(&mut buf, t);
            }
        }
    }
    atomic_write(path, &buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: &str) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn need(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail("truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.need(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.need(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.need(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.fail("length field overflows"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.need(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.usize()?;
        let bytes = self.need(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.fail("invalid utf-8 in name"))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.usize()?;
        if ndim == 0 || ndim > 8 {
            return Err(self.fail("implausible tensor rank"));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut count = 1usize;
        for _ in 0..ndim {
            let d = self.usize()?;
            count = count
                .checked_mul(d)
                .ok_or_else(|| self.fail("tensor shape overflows"))?;
            shape.push(d);
        }
        let raw = self.need(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    crate::corpus::require_file(path)?;
    let buf = std::fs::read(path)?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    if r.need(8)? != CHECKPOINT_MAGIC {
        return Err(r.fail("not a checkpoint file (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(&format!(
            "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mut hp = Hyperparams::default();
    hp.d_w = r.usize()?;
    hp.d_h = r.usize()?;
    hp.d_u = r.usize()?;
    hp.fc_dim = r.usize()?;
    hp.batch_source = r.usize()?;
    hp.batch_target = r.usize()?;
    hp.lambda = r.f64()?;
    hp.rho = r.f64()?;
    hp.margin = r.f64()?;
    hp.learning_rate = r.f64()?;
    hp.clip_norm = r.f64()?;
    hp.dropout = r.f64()?;
    let literal_position_band = r.u8()? != 0;
    let n_categories = r.usize()?;
    let stored_hash = r.u64()?;
    let n_tokens = r.usize()?;
    let mut tokens = Vec::with_capacity(n_tokens.min(1 << 20));
    for _ in 0..n_tokens {
        tokens.push(r.string()?);
    }
    let vocab = crate::corpus::Vocab::from_tokens(tokens)?;
    if vocab.hash() != stored_hash {
        return Err(r.fail("vocabulary hash mismatch: file is corrupt or inconsistent"));
    }
    let n_networks = r.usize()?;
    let mut networks = Vec::with_capacity(n_networks.min(16));
    for _ in 0..n_networks {
        let name = r.string()?;
        let has_opt = r.u8()?;
        let opt_t = if has_opt == 1 { Some(r.u64()?) } else { None };
        let n_params = r.usize()?;
        let mut params = ParamSet::new();
        for _ in 0..n_params {
            let pname = r.string()?;
            let t = r.tensor()?;
            params.insert(&pname, t);
        }
        let opt = match opt_t {
            Some(t) => {
                let mut m = Vec::with_capacity(n_params);
                for _ in 0..n_params {
                    m.push(r.tensor()?);
                }
                let mut v = Vec::with_capacity(n_params);
                for _ in 0..n_params {
                    v.push(r.tensor()?);
                }
                Some(AdamSnapshot { t, m, v })
            }
            None => None,
        };
        networks.push(NetworkBlock { name, params, opt });
    }
    if r.pos != buf.len() {
        return Err(r.fail("trailing bytes after checkpoint payload"));
    }
    Ok(Checkpoint {
        hp,
        literal_position_band,
        n_categories,
        vocab,
        networks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{default_bank, generate, SynthSettings};

    fn tiny_hp() -> Hyperparams {
        Hyperparams {
            d_w: 4,
            d_h: 3,
            d_u: 2,
            fc_dim: 4,
            batch_source: 4,
            batch_target: 4,
            dropout: 0.5,
            ..Hyperparams::default()
        }
    }

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            hp: tiny_hp(),
            seed: 5,
            patience: 10,
            max_epochs: 3,
            max_steps: 6,
            eval_every: 2,
            ..RunConfig::default()
        }
    }

    fn tiny_corpora() -> (Vec<String>, Vec<SourceExample>, Vec<TargetExample>, Vocab) {
        let settings = SynthSettings {
            categories: 2,
            source_train: 24,
            source_eval: 4,
            target_train: 16,
            target_test: 4,
            contrastive_fraction: 0.3,
        };
        let out = generate(&default_bank(), &settings, 77).unwrap();
        let (categories, source) = out.source_train.source_examples().unwrap();
        let target = out.target_train.target_examples().unwrap();
        let mut tokens: Vec<&str> = out.source_train.tokens();
        tokens.extend(out.target_train.tokens());
        let vocab = Vocab::build(tokens, 1);
        (categories.to_vec(), source.to_vec(), target.to_vec(), vocab)
    }

    #[test]
    fn adam_first_step_is_approximately_minus_lr() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::vector(vec![0.0]));
        let mut adam = Adam::new(1e-4, &params);
        let grads = [Tensor::vector(vec![1.0])];
        adam.step(&mut params, &grads).unwrap();
        let got = params.get("w").data()[0];
        assert!((got + 1e-4).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn adam_zero_gradients_change_nothing() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::vector(vec![0.25, -0.5]));
        let before = params.clone();
        let mut adam = Adam::new(1e-2, &params);
        let grads = [Tensor::zeros(vec![2])];
        for _ in 0..5 {
            adam.step(&mut params, &grads).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn adam_trajectories_are_deterministic() {
        let run = || {
            let mut params = ParamSet::new();
            params.insert("w", Tensor::vector(vec![0.1, 0.2, 0.3]));
            let mut adam = Adam::new(1e-3, &params);
            for k in 1..=10 {
                let g = Tensor::vector(vec![0.1 * k as f64, -0.2, 0.05]);
                adam.step(&mut params, &[g]).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clip_rescales_an_oversized_gradient() {
        let mut params = ParamSet::new();
        params.insert("a", Tensor::vector(vec![0.0]));
        params.insert("b", Tensor::vector(vec![0.0]));
        let mut grads = vec![Tensor::vector(vec![30.0]), Tensor::vector(vec![40.0])];
        let norm = clip_gradients(&params, &mut grads, 40.0).unwrap();
        assert_eq!(norm, 50.0);
        assert!((grads[0].data()[0] - 24.0).abs() < 1e-12);
        assert!((grads[1].data()[0] - 32.0).abs() < 1e-12);
        let after: f64 = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        assert!(after <= 40.0 + 1e-9);
    }

    #[test]
    fn clip_leaves_gradients_at_or_below_the_ceiling_untouched() {
        let mut params = ParamSet::new();
        params.insert("a", Tensor::vector(vec![0.0]));
        let mut at = vec![Tensor::vector(vec![40.0])];
        clip_gradients(&params, &mut at, 40.0).unwrap();
        assert_eq!(at[0].data(), &[40.0]);
        let mut small = vec![Tensor::vector(vec![3.0])];
        clip_gradients(&params, &mut small, 40.0).unwrap();
        assert_eq!(small[0].data(), &[3.0]);
    }

    #[test]
    fn clip_rejects_non_finite_gradients_by_name() {
        let mut params = ParamSet::new();
        params.insert("fine", Tensor::vector(vec![0.0]));
        params.insert("broken", Tensor::vector(vec![0.0]));
        let mut grads = vec![Tensor::vector(vec![1.0]), Tensor::vector(vec![f64::NAN])];
        let err = clip_gradients(&params, &mut grads, 40.0).unwrap_err();
        assert!(err.to_string().contains("broken"), "{err}");
    }

    #[test]
    fn log_lines_render_as_flat_key_value_pairs() {
        let rec = TrainLogRecord {
            step: 3,
            l_sen: 0.5,
            l_aux: 0.0,
            l_cfa: 0.0,
            l_reg: 1.25,
            val_acc: 0.75,
            val_f1: 0.5,
        };
        assert_eq!(
            render_log(&[rec]),
            "step=3 l_sen=0.5 l_aux=0 l_cfa=0 l_reg=1.25 val_acc=0.75 val_f1=0.5\n"
        );
    }

    #[test]
    fn split_is_deterministic_and_sized_by_fraction() {
        let mut rng = Rng::new(9);
        let (train, val) = split_indices(20, 0.1, &mut rng).unwrap();
        assert_eq!(val.len(), 2);
        assert_eq!(train.len(), 18);
        let mut all: Vec<usize> = train.iter().chain(val.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        let mut rng2 = Rng::new(9);
        assert_eq!(split_indices(20, 0.1, &mut rng2).unwrap(), (train, val));
    }

    #[test]
    fn initialization_copies_every_shared_group_bit_exactly() {
        let hp = tiny_hp();
        let mut rng = Rng::new(40);
        let g_s = SourceNet::new(&hp, 12, 2, &mut rng);
        let g_t = init_target_from_source(&g_s, &hp, 12, 123).unwrap();
        for (name, t) in g_t.params.iter() {
            assert_eq!(
                t,
                g_s.params.get(name),
                "{name} should be copied from the coarse network"
            );
        }
        assert!(g_t.params.index_of("c2f.w_f").is_none());
    }

    #[test]
    fn loss_decreases_over_fifty_repeated_steps_on_one_batch() {
        let (_cats, source, _target, vocab) = tiny_corpora();
        let hp = Hyperparams {
            learning_rate: 1e-2,
            dropout: 0.0,
            ..tiny_hp()
        };
        let mut rng = Rng::new(41);
        let mut net = SourceNet::new(&hp, vocab.len(), 2, &mut rng);
        let mut adam = Adam::new(hp.learning_rate, &net.params);
        let mut batch_rng = Rng::new(1);
        let batch = batches_source(&source[..4], &vocab, 4, &mut batch_rng, false)
            .unwrap()
            .remove(0);
        let mut drop_rng = Rng::new(2);
        let mut first = 0.0;
        let mut last = 0.0;
        for k in 0..50 {
            let st =
                source_step(&mut net, &mut adam, &hp, &batch, &mut drop_rng, None, true).unwrap();
            if k == 0 {
                first = st.total;
            }
            last = st.total;
        }
        assert!(last < first, "no progress: first {first}, last {last}");
    }

    #[test]
    fn source_step_with_frozen_side_never_touches_it() {
        let (_cats, source, target, vocab) = tiny_corpora();
        let hp = tiny_hp();
        let mut rng = Rng::new(42);
        let mut g_s = SourceNet::new(&hp, vocab.len(), 2, &mut rng);
        let mut g_t = TargetNet::new(&hp, vocab.len(), &mut rng);
        let before = g_t.params.clone();
        let mut adam_s = Adam::new(hp.learning_rate, &g_s.params);
        let mut batch_rng = Rng::new(3);
        let sb = batches_source(&source[..4], &vocab, 4, &mut batch_rng, false)
            .unwrap()
            .remove(0);
        let tb = batches_target(&target[..4], &vocab, 4, &mut batch_rng, false)
            .unwrap()
            .remove(0);
        let mut drop_rng = Rng::new(4);
        source_step(
            &mut g_s,
            &mut adam_s,
            &hp,
            &sb,
            &mut drop_rng,
            Some(FrozenSide {
                net: &mut g_t,
                adam: None,
                batch: &tb,
                lambda: hp.lambda,
            }),
            true,
        )
        .unwrap();
        assert_eq!(g_t.params, before);
    }

    #[test]
    fn joint_flow_updates_the_frozen_side() {
        let (_cats, source, target, vocab) = tiny_corpora();
        let hp = Hyperparams {
            lambda: 1.0,
            ..tiny_hp()
        };
        let mut rng = Rng::new(43);
        let mut g_s = SourceNet::new(&hp, vocab.len(), 2, &mut rng);
        let mut g_t = TargetNet::new(&hp, vocab.len(), &mut rng);
        let before = g_t.params.clone();
        let mut adam_s = Adam::new(hp.learning_rate, &g_s.params);
        let mut adam_t = Adam::new(hp.learning_rate, &g_t.params);
        let mut batch_rng = Rng::new(3);
        let sb = batches_source(&source[..4], &vocab, 4, &mut batch_rng, false)
            .unwrap()
            .remove(0);
        let tb = batches_target(&target[..4], &vocab, 4, &mut batch_rng, false)
            .unwrap()
            .remove(0);
        let mut drop_rng = Rng::new(4);
        source_step(
            &mut g_s,
            &mut adam_s,
            &hp,
            &sb,
            &mut drop_rng,
            Some(FrozenSide {
                net: &mut g_t,
                adam: Some(&mut adam_t),
                batch: &tb,
                lambda: hp.lambda,
            }),
            true,
        )
        .unwrap();
        assert_ne!(g_t.params, before);
    }

    #[test]
    fn zero_learning_rate_stops_after_patience_flat_evaluations() {
        let (cats, source, _target, vocab) = tiny_corpora();
        let cfg = RunConfig {
            hp: Hyperparams {
                learning_rate: 0.0,
                ..tiny_hp()
            },
            patience: 3,
            max_epochs: 50,
            ..tiny_cfg()
        };
        let out = pretrain_source(&cats, &source, &vocab, &cfg, None).unwrap();
        // First evaluation improves on -inf, then `patience` flat ones.
        assert_eq!(out.log.len(), 1 + cfg.patience);
    }

    #[test]
    fn pretrain_rejects_an_empty_corpus() {
        let (_cats, _source, _target, vocab) = tiny_corpora();
        let err =
            pretrain_source(&["food".to_string()], &[], &vocab, &tiny_cfg(), None).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn pretrain_is_deterministic_under_a_seed() {
        let (cats, source, _target, vocab) = tiny_corpora();
        let cfg = RunConfig {
            max_epochs: 2,
            ..tiny_cfg()
        };
        let a = pretrain_source(&cats, &source, &vocab, &cfg, None).unwrap();
        let b = pretrain_source(&cats, &source, &vocab, &cfg, None).unwrap();
        assert_eq!(render_log(&a.log), render_log(&b.log));
        assert_eq!(a.net.params, b.net.params);
    }

    #[test]
    fn lambda_zero_alternation_is_exactly_fine_tuning() {
        let (cats, source, target, vocab) = tiny_corpora();
        let mut cfg = tiny_cfg();
        cfg.hp.lambda = 0.0;
        cfg.patience = 1000;
        // 12 fine train examples at batch 4 give 3 steps per epoch, so 6
        // alternating iterations consume exactly 2 epochs of fine batches.
        cfg.max_steps = 6;
        cfg.eval_every = 2;

        let pre = pretrain_source(
            &cats,
            &source,
            &vocab,
            &RunConfig {
                max_epochs: 1,
                ..cfg.clone()
            },
            None,
        )
        .unwrap();
        let g_t0 = init_target_from_source(&pre.net, &cfg.hp, vocab.len(), cfg.seed).unwrap();
        let (train, val) = (&target[..12], &target[12..]);

        let alt = alternating_train(
            pre.net,
            TargetNet {
                params: g_t0.params.clone(),
            },
            &source,
            train,
            val,
            &vocab,
            &cfg,
        )
        .unwrap();

        let ft_cfg = RunConfig {
            max_epochs: 2,
            ..cfg.clone()
        };
        let ft = train_target_only(
            TargetNet {
                params: g_t0.params.clone(),
            },
            train,
            val,
            &vocab,
            &ft_cfg,
        )
        .unwrap();
        assert_eq!(alt.final_target_params, ft.final_params);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let hp = tiny_hp();
        let mut rng = Rng::new(50);
        let g_s = SourceNet::new(&hp, 10, 2, &mut rng);
        let g_t = TargetNet::new(&hp, 10, &mut rng);
        let mut adam = Adam::new(hp.learning_rate, &g_s.params);
        let grads: Vec<Tensor> = g_s
            .params
            .tensors()
            .map(|t| {
                let mut z = Tensor::zeros(t.shape().to_vec());
                z.data_mut()[0] = 0.5;
                z
            })
            .collect();
        let mut params = g_s.params.clone();
        adam.step(&mut params, &grads).unwrap();

        let vocab = Vocab::build(
            [
                "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta",
            ],
            1,
        );
        assert_eq!(vocab.len(), 10);
        let ck = Checkpoint {
            hp: hp.clone(),
            literal_position_band: true,
            n_categories: 2,
            vocab,
            networks: vec![
                NetworkBlock {
                    name: "source".into(),
                    params,
                    opt: Some(adam.snapshot()),
                },
                NetworkBlock {
                    name: "target".into(),
                    params: g_t.params.clone(),
                    opt: None,
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.hp, ck.hp);
        assert_eq!(back.literal_position_band, ck.literal_position_band);
        assert_eq!(back.n_categories, 2);
        assert_eq!(back.vocab.tokens(), ck.vocab.tokens());
        assert_eq!(back.networks.len(), 2);
        assert_eq!(back.networks[0], ck.networks[0]);
        assert_eq!(back.networks[1], ck.networks[1]);

        let restored = Adam::restore(hp.learning_rate, back.networks[0].opt.as_ref().unwrap());
        assert_eq!(restored.snapshot(), adam.snapshot());
    }

    #[test]
    fn checkpoint_rejects_truncation_anywhere() {
        let hp = tiny_hp();
        let mut rng = Rng::new(51);
        let g_t = TargetNet::new(&hp, 8, &mut rng);
        let vocab = Vocab::build(["a", "b", "c", "d", "e", "f"], 1);
        let ck = Checkpoint {
            hp,
            literal_position_band: false,
            n_categories: 3,
            vocab,
            networks: vec![NetworkBlock {
                name: "target".into(),
                params: g_t.params,
                opt: None,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&ck, &path).unwrap();
        let full = std::fs::read(&path).unwrap();
        for cut in [4usize, 12, 60, full.len() / 2, full.len() - 1] {
            let clipped = &full[..cut];
            let p2 = dir.path().join("cut.ckpt");
            std::fs::write(&p2, clipped).unwrap();
            assert!(load_checkpoint(&p2).is_err(), "cut at {cut} should fail");
        }
        // Trailing garbage is also rejected.
        let mut extended = full.clone();
        extended.push(0);
        let p3 = dir.path().join("long.ckpt");
        std::fs::write(&p3, &extended).unwrap();
        assert!(load_checkpoint(&p3).is_err());
    }

    #[test]
    fn checkpoint_rejects_bad_magic_version_and_corruption() {
        let hp = tiny_hp();
        let mut rng = Rng::new(52);
        let g_t = TargetNet::new(&hp, 8, &mut rng);
        let vocab = Vocab::build(["aardvark", "b", "c", "d", "e", "f"], 1);
        let ck = Checkpoint {
            hp,
            literal_position_band: true,
            n_categories: 1,
            vocab,
            networks: vec![NetworkBlock {
                name: "target".into(),
                params: g_t.params,
                opt: None,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&ck, &path).unwrap();
        let full = std::fs::read(&path).unwrap();

        let mut bad_magic = full.clone();
        bad_magic[0] = b'X';
        std::fs::write(dir.path().join("m.ckpt"), &bad_magic).unwrap();
        assert!(load_checkpoint(&dir.path().join("m.ckpt")).is_err());

        let mut bad_version = full.clone();
        bad_version[8] = 99;
        std::fs::write(dir.path().join("v.ckpt"), &bad_version).unwrap();
        assert!(load_checkpoint(&dir.path().join("v.ckpt")).is_err());

        // Flipping a vocabulary byte breaks the stored hash.
        let needle = b"aardvark";
        let at = full
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        let mut corrupted = full.clone();
        corrupted[at] = b'b';
        std::fs::write(dir.path().join("c.ckpt"), &corrupted).unwrap();
        let err = load_checkpoint(&dir.path().join("c.ckpt")).unwrap_err();
        assert!(err.to_string().contains("hash"), "{err}");

        assert!(load_checkpoint(&dir.path().join("missing.ckpt")).is_err());
    }

    #[test]
    fn alternating_runs_and_logs_on_schedule() {
        let (cats, source, target, vocab) = tiny_corpora();
        let cfg = tiny_cfg();
        let pre = pretrain_source(
            &cats,
            &source,
            &vocab,
            &RunConfig {
                max_epochs: 1,
                ..cfg.clone()
            },
            None,
        )
        .unwrap();
        let g_t = init_target_from_source(&pre.net, &cfg.hp, vocab.len(), cfg.seed).unwrap();
        let (train, val) = (&target[..12], &target[12..]);
        let out = alternating_train(pre.net, g_t, &source, train, val, &vocab, &cfg).unwrap();
        // max_steps 6, eval_every 2: three records at steps 2, 4, 6.
        assert_eq!(out.log.len(), 3);
        assert_eq!(out.log[0].step, 2);
        assert_eq!(out.log[2].step, 6);
        assert!(out.log.iter().all(|r| r.l_cfa.is_finite()));
        assert!(out.best_val_acc >= 0.0);
    }
}
