//! Command-line surface. Every subcommand is deterministic under its seed,
//! writes artifacts atomically, and prints machine-readable key=value lines.
//! Checkpoints are self-contained (hyperparameters, vocabulary, parameters),
//! so eval and attn-dump need no config file.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{load_config, write_resolved, Hyperparams, RunConfig};
use crate::corpus::{
    load_corpus, load_corpus_auto, load_embeddings, write_corpus, Corpus, CorpusKind,
    SourceExample, TargetExample, Vocab,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_source, evaluate_target, trace_source, trace_target, write_traces};
use crate::gradcheck::grad_check;
use crate::losses::{batch_cross_entropy, cfa_loss, composite_loss, l2_reg};
use crate::model::{source_forward, target_forward, Mode, SourceNet, TargetNet};
use crate::params::{BoundParams, ParamSet};
use crate::rng::Rng;
use crate::synth::{default_bank, generate, write_manifest, SynthSettings};
use crate::tape::{Tape, VarId};
use crate::tensor::{init_uniform, Tensor};
use crate::training::{
    alternating_train, init_target_from_source, load_checkpoint, pretrain_source, save_checkpoint,
    split_indices, write_log, Checkpoint, NetworkBlock,
};

#[derive(Parser)]
#[command(
    name = "mgan",
    version,
    about = "Coarse-to-fine transfer for aspect-level sentiment"
)]
pub struct Cli {
    /// Overrides the seed from the config file (and the gradcheck default).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Write the synthetic coarse and fine corpora plus planted-term manifests.
    GenSynth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Stage 1: pretrain the coarse network on its sentiment and category losses.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Stage 2: alternating transfer training from a stage-1 checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Stage-1 checkpoint to start from.
        #[arg(long)]
        from: PathBuf,
    },
    /// Print accuracy and macro-F1 of a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Verify every analytic gradient against central finite differences.
    Gradcheck {
        /// Larger dimensions and more examples per objective.
        #[arg(long)]
        full: bool,
    },
    /// Export per-example attention traces as JSON lines.
    AttnDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::MissingFile(_) => 2,
        Error::Config { .. } => 3,
        _ => 1,
    }
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.cmd {
        Cmd::GenSynth { config } => {
            cmd_gen_synth(&load_run_config(config, cli.seed)?)?;
            Ok(0)
        }
        Cmd::Pretrain { config } => {
            cmd_pretrain(&load_run_config(config, cli.seed)?)?;
            Ok(0)
        }
        Cmd::Train { config, from } => {
            cmd_train(&load_run_config(config, cli.seed)?, from)?;
            Ok(0)
        }
        Cmd::Eval { checkpoint, corpus } => {
            cmd_eval(checkpoint, corpus)?;
            Ok(0)
        }
        Cmd::Gradcheck { full } => cmd_gradcheck(*full, cli.seed.unwrap_or(7)),
        Cmd::AttnDump {
            checkpoint,
            corpus,
            out,
        } => {
            cmd_attn_dump(checkpoint, corpus, out)?;
            Ok(0)
        }
    }
}

fn load_run_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = load_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn cmd_gen_synth(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_resolved(cfg)?;
    let out = generate(&default_bank(), &cfg.synth, cfg.seed)?;

    let with_manifest = [
        (
            "source_train",
            &out.source_train,
            &out.source_train_manifest,
            cfg.source_train_path(),
        ),
        (
            "source_eval",
            &out.source_eval,
            &out.source_eval_manifest,
            cfg.source_eval_path(),
        ),
    ];
    for (key, corpus, manifest, path) in with_manifest {
        write_corpus(corpus, &path)?;
        println!("{key}={}", path.display());
        let mpath = RunConfig::manifest_path(&path);
        write_manifest(manifest, &mpath)?;
        println!("{key}_manifest={}", mpath.display());
    }
    for (key, corpus, path) in [
        ("target_train", &out.target_train, cfg.target_train_path()),
        ("target_test", &out.target_test, cfg.target_test_path()),
    ] {
        write_corpus(corpus, &path)?;
        println!("{key}={}", path.display());
    }
    Ok(())
}

/// One embedding table serves both networks, so the vocabulary covers the
/// coarse corpus and the fine training corpus together.
fn shared_vocab(source: &Corpus, target: &Corpus, min_count: usize) -> Vocab {
    let mut tokens = source.tokens();
    tokens.extend(target.tokens());
    Vocab::build(tokens, min_count)
}

fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_resolved(cfg)?;
    let source = load_corpus(&cfg.source_train_path(), CorpusKind::Source)?;
    let target = load_corpus(&cfg.target_train_path(), CorpusKind::Target)?;
    let (categories, examples) = source.source_examples()?;
    let vocab = shared_vocab(&source, &target, cfg.min_count);

    let embedding = match &cfg.embeddings {
        Some(path) => {
            let mut rng = Rng::derive(cfg.seed, "embeddings");
            let load = load_embeddings(path, &vocab, cfg.hp.d_w, &mut rng)?;
            println!("embeddings_covered={}", load.covered);
            Some(load.table)
        }
        None => None,
    };

    let outcome = pretrain_source(categories, examples, &vocab, cfg, embedding)?;
    let ckpt = Checkpoint {
        hp: cfg.hp.clone(),
        literal_position_band: cfg.literal_position_band,
        n_categories: categories.len(),
        vocab,
        networks: vec![NetworkBlock {
            name: "source".into(),
            params: outcome.net.params.clone(),
            opt: None,
        }],
    };
    let path = cfg.out_dir.join("stage1.ckpt");
    save_checkpoint(&ckpt, &path)?;
    write_log(&outcome.log, &cfg.out_dir.join("pretrain.log"))?;
    println!("checkpoint={}", path.display());
    println!("best_val_acc={}", outcome.best_val_acc);
    Ok(())
}

/// The checkpoint fixes the architecture; a config that disagrees on a
/// structural dimension is a mistake, not a request.
fn check_dims_match(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<()> {
    for (key, ckpt_v, cfg_v) in [
        ("d_w", ckpt.hp.d_w, cfg.hp.d_w),
        ("d_h", ckpt.hp.d_h, cfg.hp.d_h),
        ("d_u", ckpt.hp.d_u, cfg.hp.d_u),
        ("fc_dim", ckpt.hp.fc_dim, cfg.hp.fc_dim),
    ] {
        if ckpt_v != cfg_v {
            return Err(Error::Config {
                key: key.into(),
                msg: format!("config says {cfg_v} but the checkpoint was built with {ckpt_v}"),
            });
        }
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, from: &Path) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_resolved(cfg)?;
    let ckpt = load_checkpoint(from)?;
    check_dims_match(cfg, &ckpt)?;
    let g_s = {
        let block = ckpt.network("source").ok_or_else(|| Error::Checkpoint {
            path: from.to_path_buf(),
            msg: "no coarse network block; run pretrain first".into(),
        })?;
        SourceNet {
            params: block.params.clone(),
            n_categories: ckpt.n_categories,
        }
    };
    let n_categories = ckpt.n_categories;
    let vocab = ckpt.vocab;

    let source = load_corpus(&cfg.source_train_path(), CorpusKind::Source)?;
    let (_, source_examples) = source.source_examples()?;
    let target = load_corpus(&cfg.target_train_path(), CorpusKind::Target)?;
    let target_examples = target.target_examples()?;
    let mut split_rng = Rng::derive(cfg.seed, "split/target");
    let (train_idx, val_idx) =
        split_indices(target_examples.len(), cfg.val_fraction, &mut split_rng)?;
    let train: Vec<TargetExample> = train_idx
        .iter()
        .map(|&i| target_examples[i].clone())
        .collect();
    let val: Vec<TargetExample> = val_idx
        .iter()
        .map(|&i| target_examples[i].clone())
        .collect();

    let g_t = init_target_from_source(&g_s, &cfg.hp, vocab.len(), cfg.seed)?;
    let out = alternating_train(g_s, g_t, source_examples, &train, &val, &vocab, cfg)?;

    let ckpt2 = Checkpoint {
        hp: cfg.hp.clone(),
        literal_position_band: cfg.literal_position_band,
        n_categories,
        vocab,
        networks: vec![
            NetworkBlock {
                name: "source".into(),
                params: out.g_s.params,
                opt: None,
            },
            NetworkBlock {
                name: "target".into(),
                params: out.g_t.params,
                opt: None,
            },
        ],
    };
    let path = cfg.out_dir.join("stage2.ckpt");
    save_checkpoint(&ckpt2, &path)?;
    write_log(&out.log, &cfg.out_dir.join("train.log"))?;
    println!("checkpoint={}", path.display());
    println!("best_val_acc={}", out.best_val_acc);
    Ok(())
}

fn cmd_eval(checkpoint: &Path, corpus_path: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let corpus = load_corpus_auto(corpus_path)?;
    let (acc, f1) = match &corpus {
        Corpus::Source { examples, .. } => {
            let block = ckpt.network("source").ok_or_else(|| Error::Checkpoint {
                path: checkpoint.to_path_buf(),
                msg: "checkpoint holds no coarse network".into(),
            })?;
            let net = SourceNet {
                params: block.params.clone(),
                n_categories: ckpt.n_categories,
            };
            evaluate_source(&net, &ckpt.hp, examples, &ckpt.vocab)?
        }
        Corpus::Target { examples } => {
            let block = ckpt.network("target").ok_or_else(|| Error::Checkpoint {
                path: checkpoint.to_path_buf(),
                msg: "checkpoint holds no fine network; this looks like a stage-1 file".into(),
            })?;
            let net = TargetNet {
                params: block.params.clone(),
            };
            evaluate_target(
                &net,
                &ckpt.hp,
                examples,
                &ckpt.vocab,
                ckpt.literal_position_band,
            )?
        }
    };
    println!("accuracy={acc}");
    println!("macro_f1={f1}");
    Ok(())
}

fn cmd_attn_dump(checkpoint: &Path, corpus_path: &Path, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let corpus = load_corpus_auto(corpus_path)?;
    let mut lines = Vec::with_capacity(corpus.len());
    match &corpus {
        Corpus::Source { examples, .. } => {
            let block = ckpt.network("source").ok_or_else(|| Error::Checkpoint {
                path: checkpoint.to_path_buf(),
                msg: "checkpoint holds no coarse network".into(),
            })?;
            let net = SourceNet {
                params: block.params.clone(),
                n_categories: ckpt.n_categories,
            };
            for ex in examples.iter() {
                lines.push(trace_source(&net, &ckpt.hp, ex, &ckpt.vocab)?);
            }
        }
        Corpus::Target { examples } => {
            let block = ckpt.network("target").ok_or_else(|| Error::Checkpoint {
                path: checkpoint.to_path_buf(),
                msg: "checkpoint holds no fine network; this looks like a stage-1 file".into(),
            })?;
            let net = TargetNet {
                params: block.params.clone(),
            };
            for ex in examples.iter() {
                lines.push(trace_target(
                    &net,
                    &ckpt.hp,
                    ex,
                    &ckpt.vocab,
                    ckpt.literal_position_band,
                )?);
            }
        }
    }
    write_traces(&lines, out)?;
    println!("out={}", out.display());
    println!("examples={}", lines.len());
    Ok(())
}

// ── Gradient verification ────────────────────────────────────────────────

pub struct SuiteReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub passed: bool,
}

/// Forward a fine batch once and keep the sentence representations as
/// plain tensors, the way an alternating step sees the frozen network.
fn frozen_target_reps(
    net: &TargetNet,
    hp: &Hyperparams,
    examples: &[TargetExample],
    vocab: &Vocab,
    band: bool,
) -> Result<Vec<(Tensor, usize)>> {
    let mut reps = Vec::with_capacity(examples.len());
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
            band,
            &mut Mode::Eval,
        )?;
        reps.push((tape.value(out.v_o).clone(), ex.sentiment.index()));
    }
    Ok(reps)
}

fn frozen_source_reps(
    net: &SourceNet,
    hp: &Hyperparams,
    examples: &[SourceExample],
    vocab: &Vocab,
) -> Result<Vec<(Tensor, usize)>> {
    let mut reps = Vec::with_capacity(examples.len());
    for ex in examples {
        let mut tape = Tape::new();
        let bp = net.params.bind(&mut tape);
        let ctx = vocab.encode(&ex.context);
        let asp = vocab.encode(&ex.aspect_words);
        let out = source_forward(&mut tape, &bp, hp, &ctx, &asp, &mut Mode::Eval)?;
        reps.push((tape.value(out.v_o).clone(), ex.sentiment.index()));
    }
    Ok(reps)
}

fn constants(tape: &mut Tape, reps: &[(Tensor, usize)]) -> Vec<(VarId, usize)> {
    reps.iter()
        .map(|(t, y)| (tape.constant(t.clone()), *y))
        .collect()
}

/// Sentiment loss, auxiliary loss, and sentence representations of a coarse
/// batch, forwarded deterministically.
fn source_objective_terms(
    tape: &mut Tape,
    bp: &BoundParams,
    hp: &Hyperparams,
    vocab: &Vocab,
    examples: &[SourceExample],
) -> Result<(VarId, VarId, Vec<(VarId, usize)>)> {
    let mut sen = Vec::new();
    let mut aux = Vec::new();
    let mut reps = Vec::new();
    for ex in examples {
        let ctx = vocab.encode(&ex.context);
        let asp = vocab.encode(&ex.aspect_words);
        let o = source_forward(tape, bp, hp, &ctx, &asp, &mut Mode::Eval)?;
        sen.push((o.sent_logits, ex.sentiment.index()));
        aux.push((o.aux_logits, ex.category_id));
        reps.push((o.v_o, ex.sentiment.index()));
    }
    Ok((
        batch_cross_entropy(tape, &sen)?,
        batch_cross_entropy(tape, &aux)?,
        reps,
    ))
}

fn target_objective_terms(
    tape: &mut Tape,
    bp: &BoundParams,
    hp: &Hyperparams,
    vocab: &Vocab,
    examples: &[TargetExample],
) -> Result<(VarId, Vec<(VarId, usize)>)> {
    let mut sen = Vec::new();
    let mut reps = Vec::new();
    for ex in examples {
        let ctx = vocab.encode(&ex.context);
        let o = target_forward(
            tape,
            bp,
            hp,
            &ctx,
            ex.span_start,
            ex.span_len,
            true,
            &mut Mode::Eval,
        )?;
        sen.push((o.sent_logits, ex.sentiment.index()));
        reps.push((o.v_o, ex.sentiment.index()));
    }
    Ok((batch_cross_entropy(tape, &sen)?, reps))
}

/// The module-level and end-to-end objectives, each checked over every
/// parameter entry of the network it trains. The frozen counterpart's
/// representations enter as constants, exactly as a training step treats
/// them; dropout stays off so repeated evaluations are identical.
pub fn gradcheck_suite(full: bool, seed: u64) -> Result<Vec<SuiteReport>> {
    let hp = Hyperparams {
        d_w: if full { 10 } else { 8 },
        d_h: if full { 8 } else { 6 },
        d_u: if full { 6 } else { 5 },
        fc_dim: if full { 9 } else { 7 },
        dropout: 0.0,
        rho: 1e-4,
        ..Hyperparams::default()
    };
    let settings = SynthSettings {
        categories: 3,
        source_train: 8,
        source_eval: 2,
        target_train: 8,
        target_test: 2,
        contrastive_fraction: 0.0,
    };
    let out = generate(&default_bank(), &settings, seed)?;
    let (_, source_all) = out.source_train.source_examples()?;
    let target_all = out.target_train.target_examples()?;
    let mut tokens = out.source_train.tokens();
    tokens.extend(out.target_train.tokens());
    let vocab = Vocab::build(tokens, 1);

    let k = if full { 3 } else { 2 };
    let source_ex = &source_all[..k];
    let target_ex = &target_all[..k];

    let mut rng = Rng::derive(seed, "gradcheck/init");
    let g_s = SourceNet::new(&hp, vocab.len(), 3, &mut rng);
    let g_t = TargetNet::new(&hp, vocab.len(), &mut rng);
    let source_reps = frozen_source_reps(&g_s, &hp, source_ex, &vocab)?;
    let target_reps = frozen_target_reps(&g_t, &hp, target_ex, &vocab, true)?;

    let mut reports = Vec::new();
    let mut push = |name: &'static str, r: crate::gradcheck::GradCheckReport| {
        reports.push(SuiteReport {
            name,
            max_rel_err: r.max_rel_err,
            worst_param: r.worst_param.clone(),
            passed: r.passed(),
        });
    };

    push(
        "coarse-objective",
        grad_check(&g_s.params, 1e-5, 1e-5, |tape, bp| {
            let (l_sen, l_aux, _) = source_objective_terms(tape, bp, &hp, &vocab, source_ex)?;
            let l_reg = l2_reg(tape, bp)?;
            composite_loss(tape, l_sen, Some(l_aux), None, 0.0, l_reg, hp.rho)
        })?,
    );

    push(
        "fine-objective",
        grad_check(&g_t.params, 1e-5, 1e-5, |tape, bp| {
            let (l_sen, _) = target_objective_terms(tape, bp, &hp, &vocab, target_ex)?;
            let l_reg = l2_reg(tape, bp)?;
            composite_loss(tape, l_sen, None, None, 0.0, l_reg, hp.rho)
        })?,
    );

    let mut align = ParamSet::new();
    let mut arng = Rng::derive(seed, "gradcheck/align");
    for name in ["u0", "u1", "v0", "v1"] {
        align.insert(name, init_uniform(vec![2 * hp.d_h], &mut arng));
    }
    push(
        "alignment-loss",
        grad_check(&align, 1e-5, 1e-5, |tape, bp| {
            let source = [(bp.get("u0"), 0), (bp.get("u1"), 1)];
            let target = [(bp.get("v0"), 0), (bp.get("v1"), 2)];
            cfa_loss(tape, &source, &target, hp.margin)
        })?,
    );

    push(
        "coarse-with-alignment",
        grad_check(&g_s.params, 1e-5, 1e-5, |tape, bp| {
            let (l_sen, l_aux, reps) = source_objective_terms(tape, bp, &hp, &vocab, source_ex)?;
            let other = constants(tape, &target_reps);
            let l_cfa = cfa_loss(tape, &reps, &other, hp.margin)?;
            let l_reg = l2_reg(tape, bp)?;
            composite_loss(
                tape,
                l_sen,
                Some(l_aux),
                Some(l_cfa),
                hp.lambda,
                l_reg,
                hp.rho,
            )
        })?,
    );

    push(
        "fine-with-alignment",
        grad_check(&g_t.params, 1e-5, 1e-5, |tape, bp| {
            let (l_sen, reps) = target_objective_terms(tape, bp, &hp, &vocab, target_ex)?;
            let other = constants(tape, &source_reps);
            let l_cfa = cfa_loss(tape, &other, &reps, hp.margin)?;
            let l_reg = l2_reg(tape, bp)?;
            composite_loss(tape, l_sen, None, Some(l_cfa), hp.lambda, l_reg, hp.rho)
        })?,
    );

    Ok(reports)
}

fn cmd_gradcheck(full: bool, seed: u64) -> Result<i32> {
    let reports = gradcheck_suite(full, seed)?;
    let mut failed: Option<&SuiteReport> = None;
    for r in &reports {
        println!(
            "check={} max_rel_err={} worst={} status={}",
            r.name,
            r.max_rel_err,
            r.worst_param,
            if r.passed { "ok" } else { "FAIL" }
        );
        if !r.passed && failed.is_none() {
            failed = Some(r);
        }
    }
    match failed {
        Some(r) => {
            eprintln!(
                "error: gradient check `{}` failed at parameter `{}` (max relative error {})",
                r.name, r.worst_param, r.max_rel_err
            );
            Ok(4)
        }
        None => {
            println!("gradcheck=ok");
            Ok(0)
        }
    }
}
