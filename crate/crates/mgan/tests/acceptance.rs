//! Release gate: one test per acceptance criterion, each printing a single
//! `[acceptance] C<n> <name>: PASS/FAIL (...)` line before asserting.
//! Training-based criteria run on reduced dimensions so the whole gate fits
//! a CI budget; quantities a criterion pins (corpus sizes, the 1e-4
//! learning rate in C5, tolerances) are kept verbatim.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use mgan::attention::{c2a, c2f, pas, position_relevance_target, Relevance};
use mgan::cli::gradcheck_suite;
use mgan::config::{Hyperparams, RunConfig};
use mgan::corpus::{Sentiment, TargetExample, Vocab};
use mgan::eval::{c2f_localization, chance_hit_rate, evaluate_target, Confusion};
use mgan::losses::{cfa_loss, contrastive_omega};
use mgan::model::{source_forward, Mode, SourceNet, TargetNet};
use mgan::rng::Rng;
use mgan::synth::{default_bank, generate, SynthBank, SynthSettings};
use mgan::tape::Tape;
use mgan::tensor::Tensor;
use mgan::training::{
    alternating_train, init_target_from_source, load_checkpoint, pretrain_source, save_checkpoint,
    split_indices, train_target_only,
};

/// Prints the criterion line, then fails the test if the criterion did not
/// hold. Every test calls this exactly once, so the line always appears.
fn verdict(number: u32, name: &str, pass: bool, details: &str) {
    println!(
        "[acceptance] C{number} {name}: {} ({details})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "C{number} {name}: {details}");
}

#[test]
fn c1_gradient_fidelity() {
    let start = Instant::now();
    let reports = gradcheck_suite(false, 7).expect("gradient suite must run");
    let mut worst_err = 0.0f64;
    let mut worst = String::from("-");
    let mut all_passed = !reports.is_empty();
    for r in &reports {
        if r.max_rel_err > worst_err {
            worst_err = r.max_rel_err;
            worst = format!("{}/{}", r.name, r.worst_param);
        }
        all_passed &= r.passed;
    }
    verdict(
        1,
        "gradient-fidelity",
        all_passed,
        &format!(
            "{} end-to-end checks, max rel err {:.3e} at {}, tol 1e-5, {:.1?}",
            reports.len(),
            worst_err,
            worst,
            start.elapsed()
        ),
    );
}

/// Independent restatement of the span-based relevance: 1-based positions,
/// a zero band over the aspect, linear decay with distance on both sides.
fn oracle_span_relevance(n: usize, start: usize, len: usize, literal: bool) -> Vec<f64> {
    let nf = n as f64;
    let first = (start + 1) as f64;
    let band_end = if literal {
        first + len as f64
    } else {
        first + len as f64 - 1.0
    };
    (1..=n)
        .map(|i| {
            let i = i as f64;
            if i < first {
                1.0 - (first - i) / nf
            } else if i <= band_end {
                0.0
            } else {
                1.0 - (i - band_end) / nf
            }
        })
        .collect()
}

#[test]
fn c2_position_relevance_closed_forms() {
    // Exhaustive sweep of the span form, both band conventions, bit-exact.
    let mut span_cases = 0usize;
    let mut span_mismatch = None;
    for n in 1..=12usize {
        for start in 0..n {
            for len in 1..=(n - start) {
                for literal in [false, true] {
                    let got = position_relevance_target(n, start, len, literal)
                        .expect("valid span must succeed");
                    let want = oracle_span_relevance(n, start, len, literal);
                    span_cases += 1;
                    if got.data() != want.as_slice() && span_mismatch.is_none() {
                        span_mismatch =
                            Some(format!("n={n} start={start} len={len} literal={literal}"));
                    }
                }
            }
        }
    }

    // The attention-derived form against the explicit location-matrix
    // product p_i = sum_j (1 - |i-j|/n) beta_j.
    let mut rng = Rng::derive(31, "acceptance/c2");
    let mut max_err = 0.0f64;
    for _ in 0..1000 {
        let n = 1 + rng.below(30);
        let raw: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 1.0).exp()).collect();
        let total: f64 = raw.iter().sum();
        let beta: Vec<f64> = raw.iter().map(|v| v / total).collect();

        let mut tape = Tape::new();
        let b = tape.constant(Tensor::vector(beta.clone()));
        let p = tape
            .position_from_attention(b)
            .expect("normalized weights must be accepted");
        let got = tape.value(p).data().to_vec();
        let nf = n as f64;
        for i in 0..n {
            let want: f64 = (0..n)
                .map(|j| (1.0 - (i as f64 - j as f64).abs() / nf) * beta[j])
                .sum();
            max_err = max_err.max((got[i] - want).abs());
        }
    }

    let pass = span_mismatch.is_none() && max_err <= 1e-12;
    verdict(
        2,
        "position-relevance-closed-forms",
        pass,
        &format!(
            "{span_cases} exhaustive span cases exact{}, attention form max err {max_err:.3e} over 1000 draws, tol 1e-12",
            span_mismatch
                .map(|m| format!(" except {m}"))
                .unwrap_or_default()
        ),
    );
}

#[test]
fn c3_contrastive_loss_suite() {
    let mut rng = Rng::derive(32, "acceptance/c3");
    let dim = 12;
    let margin = 1.0;
    let mut first_failure = None;
    let mut dup_err = 0.0f64;
    let record = |cond: bool, what: &str, failure: &mut Option<String>| {
        if !cond && failure.is_none() {
            *failure = Some(what.to_string());
        }
    };

    for case in 0..1000 {
        let u: Vec<f64> = (0..dim).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let v: Vec<f64> = (0..dim).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(u.clone()));
        let b = tape.constant(Tensor::vector(v.clone()));

        for same in [true, false] {
            let ab_id = contrastive_omega(&mut tape, a, b, same, margin).unwrap();
            let ba_id = contrastive_omega(&mut tape, b, a, same, margin).unwrap();
            let ab = tape.item(ab_id);
            let ba = tape.item(ba_id);
            record(ab == ba, "symmetry", &mut first_failure);
            record(ab >= 0.0, "nonnegativity", &mut first_failure);
        }
        let self_same_id = contrastive_omega(&mut tape, a, a, true, margin).unwrap();
        let self_diff_id = contrastive_omega(&mut tape, a, a, false, margin).unwrap();
        record(
            tape.item(self_same_id) == 0.0,
            "omega(u,u,same) = 0",
            &mut first_failure,
        );
        record(
            tape.item(self_diff_id) == margin,
            "omega(u,u,diff) = margin",
            &mut first_failure,
        );

        // Duplicating either batch must leave the cross-product mean alone.
        let n_src = 1 + rng.below(3);
        let n_tgt = 1 + rng.below(3);
        let mut src = Vec::new();
        let mut tgt = Vec::new();
        for _ in 0..n_src {
            let x: Vec<f64> = (0..dim).map(|_| rng.uniform(-2.0, 2.0)).collect();
            src.push((tape.constant(Tensor::vector(x)), rng.below(3)));
        }
        for _ in 0..n_tgt {
            let x: Vec<f64> = (0..dim).map(|_| rng.uniform(-2.0, 2.0)).collect();
            tgt.push((tape.constant(Tensor::vector(x)), rng.below(3)));
        }
        let doubled_src: Vec<_> = src.iter().chain(src.iter()).copied().collect();
        let doubled_tgt: Vec<_> = tgt.iter().chain(tgt.iter()).copied().collect();
        let base_id = cfa_loss(&mut tape, &src, &tgt, margin).unwrap();
        let dup_s_id = cfa_loss(&mut tape, &doubled_src, &tgt, margin).unwrap();
        let dup_t_id = cfa_loss(&mut tape, &src, &doubled_tgt, margin).unwrap();
        let base = tape.item(base_id);
        dup_err = dup_err
            .max((tape.item(dup_s_id) - base).abs())
            .max((tape.item(dup_t_id) - base).abs());

        let _ = case;
    }

    let pass = first_failure.is_none() && dup_err <= 1e-12;
    verdict(
        3,
        "contrastive-loss-suite",
        pass,
        &format!(
            "1000 cases: symmetry/nonnegativity/fixed-point identities exact{}, duplication err {dup_err:.3e}, tol 1e-12",
            first_failure
                .map(|f| format!(" except {f}"))
                .unwrap_or_default()
        ),
    );
}

fn sum_abs_err(got: &[f64], want: &[f64]) -> f64 {
    got.iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

#[test]
fn c4_attention_normalization() {
    let hp = Hyperparams {
        d_w: 6,
        d_h: 4,
        d_u: 3,
        fc_dim: 5,
        dropout: 0.0,
        ..Hyperparams::default()
    };
    let vocab_size = 21;
    let mut norm_err = 0.0f64;
    let mut pad_err = 0.0f64;
    let mut pad_leak = 0.0f64;

    for draw in 0..1000u64 {
        let mut rng = Rng::derive(4000 + draw, "acceptance/c4");
        let net = SourceNet::new(&hp, vocab_size, 3, &mut rng);
        let n = 1 + rng.below(9);
        let m = 1 + rng.below(3);
        let ctx: Vec<usize> = (0..n).map(|_| 1 + rng.below(vocab_size - 1)).collect();
        let asp: Vec<usize> = (0..m).map(|_| 1 + rng.below(vocab_size - 1)).collect();

        // All three attentions normalize over the positions that exist.
        let mut tape = Tape::new();
        let bp = net.params.bind(&mut tape);
        let out = source_forward(&mut tape, &bp, &hp, &ctx, &asp, &mut Mode::Eval).unwrap();
        for id in [out.alpha, out.beta, out.gamma] {
            let sum: f64 = tape.value(id).data().iter().sum();
            norm_err = norm_err.max((sum - 1.0).abs());
        }

        // Masked padding rows of arbitrary content must not perturb any
        // output, and the padded attention slots must come out exactly zero.
        let two_dh = 2 * hp.d_h;
        let h_real: Vec<f64> = (0..n * two_dh).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let e_real: Vec<f64> = (0..m * hp.d_w).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let pad_n = 1 + rng.below(3);
        let pad_m = 1 + rng.below(2);
        let mut h_padded = h_real.clone();
        h_padded.extend((0..pad_n * two_dh).map(|_| rng.uniform(-3.0, 3.0)));
        let mut e_padded = e_real.clone();
        e_padded.extend((0..pad_m * hp.d_w).map(|_| rng.uniform(-3.0, 3.0)));

        let span_start = rng.below(n);
        let span_len = 1 + rng.below(n - span_start);
        let p_real = position_relevance_target(n, span_start, span_len, true).unwrap();
        let mut p_padded = p_real.data().to_vec();
        p_padded.extend((0..pad_n).map(|_| rng.uniform(0.0, 1.0)));
        let p_padded = Tensor::vector(p_padded);

        let mut t2 = Tape::new();
        let bp2 = net.params.bind(&mut t2);
        let mask_n = vec![true; n];
        let mask_m = vec![true; m];
        let mut mask_n_pad = vec![true; n];
        mask_n_pad.extend(vec![false; pad_n]);
        let mut mask_m_pad = vec![true; m];
        mask_m_pad.extend(vec![false; pad_m]);

        let h = t2.constant(Tensor::matrix(n, two_dh, h_real.clone()).unwrap());
        let e = t2.constant(Tensor::matrix(m, hp.d_w, e_real.clone()).unwrap());
        let hp_pad = t2.constant(Tensor::matrix(n + pad_n, two_dh, h_padded).unwrap());
        let ep_pad = t2.constant(Tensor::matrix(m + pad_m, hp.d_w, e_padded).unwrap());

        let a1 = c2a(&mut t2, &bp2, h, e, &mask_n, &mask_m).unwrap();
        let f1 = c2f(&mut t2, &bp2, h, a1.h_a, &mask_n).unwrap();
        let o1 = pas(&mut t2, &bp2, h, f1.r_a, Relevance::Fixed(&p_real), &mask_n).unwrap();

        let a2 = c2a(&mut t2, &bp2, hp_pad, ep_pad, &mask_n_pad, &mask_m_pad).unwrap();
        let f2 = c2f(&mut t2, &bp2, hp_pad, a2.h_a, &mask_n_pad).unwrap();
        let o2 = pas(
            &mut t2,
            &bp2,
            hp_pad,
            f2.r_a,
            Relevance::Fixed(&p_padded),
            &mask_n_pad,
        )
        .unwrap();

        let pairs = [
            (a1.alpha, a2.alpha, m),
            (f1.beta, f2.beta, n),
            (o1.gamma, o2.gamma, n),
        ];
        for (plain, padded, real_len) in pairs {
            let plain_v = t2.value(plain).data().to_vec();
            let padded_v = t2.value(padded).data().to_vec();
            pad_err = pad_err.max(sum_abs_err(&plain_v, &padded_v[..real_len]));
            for &w in &padded_v[real_len..] {
                pad_leak = pad_leak.max(w.abs());
            }
        }
        for (plain, padded) in [
            (a1.h_a, a2.h_a),
            (f1.v_a, f2.v_a),
            (f1.r_a, f2.r_a),
            (f1.aux_logits, f2.aux_logits),
            (o1.v_o, o2.v_o),
        ] {
            let plain_v = t2.value(plain).data().to_vec();
            let padded_v = t2.value(padded).data().to_vec();
            pad_err = pad_err.max(sum_abs_err(&plain_v, &padded_v));
        }
    }

    let pass = norm_err <= 1e-12 && pad_err <= 1e-10 && pad_leak == 0.0;
    verdict(
        4,
        "attention-normalization",
        pass,
        &format!(
            "1000 draws: |sum - 1| max {norm_err:.3e} (tol 1e-12), padding err {pad_err:.3e} (tol 1e-10), masked-slot weight {pad_leak:.1e}"
        ),
    );
}

#[test]
fn c5_optimization_sanity() {
    let start = Instant::now();
    let settings = SynthSettings {
        categories: 2,
        source_train: 4,
        source_eval: 2,
        target_train: 64,
        target_test: 2,
        contrastive_fraction: 0.25,
    };
    let data = generate(&default_bank(), &settings, 2024).unwrap();
    let train = data.target_train.target_examples().unwrap();
    let vocab = Vocab::build(data.target_train.tokens(), 1);

    // The learning rate stays at the published 1e-4; dimensions, batch
    // size, and dropout are free and chosen for a fast deterministic run.
    let hp = Hyperparams {
        d_w: 128,
        d_h: 80,
        d_u: 40,
        fc_dim: 80,
        learning_rate: 1e-4,
        dropout: 0.0,
        batch_target: 1,
        ..Hyperparams::default()
    };
    let cfg = RunConfig {
        seed: 5,
        hp: hp.clone(),
        patience: 10_000,
        max_epochs: 200,
        ..RunConfig::default()
    };
    let net = TargetNet::new(&hp, vocab.len(), &mut Rng::derive(cfg.seed, "init/target"));
    let outcome = train_target_only(net, train, train, &vocab, &cfg).unwrap();
    let first_hit = outcome.log.iter().position(|r| r.val_acc == 1.0);
    verdict(
        5,
        "optimization-sanity",
        first_hit.is_some(),
        &format!(
            "64 examples, lr 1e-4: train accuracy 1.0 {} within 200 epochs (best {:.4}), {:.1?}",
            first_hit
                .map(|i| format!("reached at epoch {}", i + 1))
                .unwrap_or_else(|| "never reached".into()),
            outcome.best_val_acc,
            start.elapsed()
        ),
    );
}

#[test]
fn c6_transfer_effect() {
    let start = Instant::now();
    let settings = SynthSettings {
        categories: 4,
        source_train: 5000,
        source_eval: 200,
        target_train: 200,
        target_test: 200,
        contrastive_fraction: 0.5,
    };
    let data = generate(&default_bank(), &settings, 424_242).unwrap();
    let (categories, source_train) = data.source_train.source_examples().unwrap();
    let target_pool = data.target_train.target_examples().unwrap();
    let target_test = data.target_test.target_examples().unwrap();
    let mut tokens = data.source_train.tokens();
    tokens.extend(data.target_train.tokens());
    let vocab = Vocab::build(tokens, 1);

    let hp = Hyperparams {
        d_w: 24,
        d_h: 16,
        d_u: 10,
        fc_dim: 16,
        learning_rate: 1e-3,
        ..Hyperparams::default()
    };

    let mut wins = 0usize;
    let mut mean_diff = 0.0f64;
    let mut per_seed = Vec::new();
    for seed in 1..=5u64 {
        // One split per seed, shared by both arms, so the pair differs only
        // in whether the target network starts from the pretrained source.
        let (tr_idx, va_idx) = split_indices(
            target_pool.len(),
            0.1,
            &mut Rng::derive(seed, "split/target"),
        )
        .unwrap();
        let tr: Vec<TargetExample> = tr_idx.iter().map(|&i| target_pool[i].clone()).collect();
        let va: Vec<TargetExample> = va_idx.iter().map(|&i| target_pool[i].clone()).collect();

        let cfg_stage1 = RunConfig {
            seed,
            hp: hp.clone(),
            val_fraction: 0.1,
            patience: 3,
            max_epochs: 8,
            ..RunConfig::default()
        };
        let pre = pretrain_source(categories, source_train, &vocab, &cfg_stage1, None).unwrap();
        let g_t = init_target_from_source(&pre.net, &hp, vocab.len(), seed).unwrap();
        let cfg_stage2 = RunConfig {
            seed,
            hp: hp.clone(),
            patience: 6,
            max_steps: 400,
            eval_every: 25,
            ..RunConfig::default()
        };
        let band = cfg_stage2.literal_position_band;
        let alt =
            alternating_train(pre.net, g_t, source_train, &tr, &va, &vocab, &cfg_stage2).unwrap();
        let (acc_transfer, _) = evaluate_target(&alt.g_t, &hp, target_test, &vocab, band).unwrap();

        let base_net = TargetNet::new(&hp, vocab.len(), &mut Rng::derive(seed, "init/target"));
        let cfg_base = RunConfig {
            seed,
            hp: hp.clone(),
            patience: 10,
            max_epochs: 60,
            ..RunConfig::default()
        };
        let base = train_target_only(base_net, &tr, &va, &vocab, &cfg_base).unwrap();
        let (acc_base, _) = evaluate_target(&base.net, &hp, target_test, &vocab, band).unwrap();

        if acc_transfer > acc_base {
            wins += 1;
        }
        mean_diff += (acc_transfer - acc_base) / 5.0;
        per_seed.push(format!("s{seed} {acc_transfer:.3}>{acc_base:.3}"));
    }

    // All five paired seeds winning is the one-sided sign check at this
    // sample size (p = 1/32 < 0.05).
    let pass = wins == 5 && mean_diff > 0.0;
    verdict(
        6,
        "transfer-effect",
        pass,
        &format!(
            "wins {wins}/5, mean improvement {mean_diff:+.4} [{}], {:.1?}",
            per_seed.join(", "),
            start.elapsed()
        ),
    );
}

/// Stand-in for pretrained word vectors on the synthetic vocabulary.
///
/// Distributional pretraining is what makes a category's terms land near
/// each other and near the category's descriptor words; the stage-1
/// localization effect rides on that structure, not on anything the tiny
/// synthetic corpus could teach from scratch. The table plants the
/// structure directly: one orthonormal direction per category shared by
/// its terms and descriptors, one per polarity shared by its cue words,
/// plus small independent noise on every row. Row 0 stays zero for the
/// padding token.
fn pretrained_stand_in(vocab: &Vocab, bank: &SynthBank, d_w: usize, seed: u64) -> Tensor {
    let cluster = 1.0;
    let noise = 0.1;
    let mut dir_rng = Rng::derive(seed, "embeddings/directions");
    let n_dirs = bank.categories.len() + 3;
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    while dirs.len() < n_dirs {
        let mut v: Vec<f64> = (0..d_w).map(|_| dir_rng.uniform(-1.0, 1.0)).collect();
        for prev in &dirs {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (x, p) in v.iter_mut().zip(prev) {
                *x -= dot * p;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for x in v.iter_mut() {
                *x /= norm;
            }
            dirs.push(v);
        }
    }
    let pol_dirs = dirs.split_off(bank.categories.len());
    let cat_dirs = dirs;

    let mut noise_rng = Rng::derive(seed, "embeddings/noise");
    let mut data = vec![0.0; vocab.len() * d_w];
    for id in 1..vocab.len() {
        let token = vocab.token(id);
        let row = &mut data[id * d_w..(id + 1) * d_w];
        for slot in row.iter_mut() {
            *slot = noise_rng.uniform(-noise, noise);
        }
        for (c, spec) in bank.categories.iter().enumerate() {
            let is_term = spec.source_terms.iter().any(|t| t[0] == token);
            let is_desc = spec.descriptors.iter().any(|d| d == token);
            if is_term || is_desc {
                for (slot, d) in row.iter_mut().zip(&cat_dirs[c]) {
                    *slot += cluster * d;
                }
            }
        }
        for (p, cues) in bank.cues.iter().enumerate() {
            if cues.iter().any(|c| c == token) {
                for (slot, d) in row.iter_mut().zip(&pol_dirs[p]) {
                    *slot += cluster * d;
                }
            }
        }
    }
    Tensor::matrix(vocab.len(), d_w, data).unwrap()
}

#[test]
fn c7_c2f_localization() {
    let start = Instant::now();
    let settings = SynthSettings {
        categories: 4,
        source_train: 5000,
        source_eval: 500,
        target_train: 8,
        target_test: 2,
        contrastive_fraction: 0.9,
    };
    let bank = default_bank();
    let data = generate(&bank, &settings, 7177).unwrap();
    let (categories, train) = data.source_train.source_examples().unwrap();
    let (_, held_out) = data.source_eval.source_examples().unwrap();
    let vocab = Vocab::build(data.source_train.tokens(), 1);

    // The recipe that makes exact localization emerge: word vectors with
    // pretrained-like cluster structure, a narrow recurrent state (a wide
    // one carries each term's identity to neighboring positions, and the
    // category head is then indifferent between a term and the word next
    // to it), mostly contrastive sentences so attention parked anywhere
    // but the term itself picks up the wrong clause's category, and no
    // embedding dropout (a dropped term row leaves only smeared evidence).
    let hp = Hyperparams {
        d_w: 24,
        d_h: 8,
        d_u: 24,
        fc_dim: 16,
        learning_rate: 1e-3,
        dropout: 0.0,
        ..Hyperparams::default()
    };
    let table = pretrained_stand_in(&vocab, &bank, hp.d_w, 33);
    // Sentiment validation accuracy saturates within a few epochs; exact
    // localization sharpens two hundred epochs later after a long plateau.
    // Early stopping is therefore disabled and the hit rate is read off
    // the final parameters rather than the best-validation snapshot.
    let cfg = RunConfig {
        seed: 7,
        hp: hp.clone(),
        val_fraction: 0.1,
        patience: 10_000,
        max_epochs: 300,
        ..RunConfig::default()
    };
    let pre = pretrain_source(categories, train, &vocab, &cfg, Some(table)).unwrap();
    let final_net = SourceNet {
        params: pre.final_params,
        n_categories: categories.len(),
    };
    let hit_rate = c2f_localization(
        &final_net,
        &hp,
        held_out,
        &vocab,
        &data.source_eval_manifest,
    )
    .unwrap();
    let chance = chance_hit_rate(held_out);

    let pass = hit_rate >= 0.80 && hit_rate > chance;
    verdict(
        7,
        "c2f-localization",
        pass,
        &format!(
            "planted-span hit rate {hit_rate:.3} on {} held-out sentences (bar 0.80, chance {chance:.3}), {:.1?}",
            held_out.len(),
            start.elapsed()
        ),
    );
}

/// Per-class precision/recall/F1 straight from a counts matrix, written
/// without reference to the library implementation.
fn brute_force_macro_f1(m: &[[usize; 3]; 3]) -> f64 {
    let mut total = 0.0;
    for c in 0..3 {
        let tp = m[c][c] as f64;
        let fp: f64 = (0..3).filter(|&g| g != c).map(|g| m[g][c] as f64).sum();
        let fn_: f64 = (0..3).filter(|&p| p != c).map(|p| m[c][p] as f64).sum();
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        total += f1;
    }
    total / 3.0
}

#[test]
fn c8_metric_oracle() {
    let mut rng = Rng::derive(88, "acceptance/c8");
    let mut max_err = 0.0f64;
    for _ in 0..1000 {
        let mut confusion = Confusion::default();
        let mut m = [[0usize; 3]; 3];
        for (g, row) in m.iter_mut().enumerate() {
            for (p, slot) in row.iter_mut().enumerate() {
                *slot = rng.below(16);
                for _ in 0..*slot {
                    confusion.record(g, p);
                }
            }
        }
        max_err = max_err.max((confusion.macro_f1() - brute_force_macro_f1(&m)).abs());
    }

    // gold [pos, pos, neg, neu], pred [pos, neg, neg, neu]:
    // F1 = 2/3, 2/3, 1 per class, macro 7/9.
    let pos = Sentiment::from_str("positive").unwrap().index();
    let neg = Sentiment::from_str("negative").unwrap().index();
    let neu = Sentiment::from_str("neutral").unwrap().index();
    let mut fixture = Confusion::default();
    for (gold, pred) in [(pos, pos), (pos, neg), (neg, neg), (neu, neu)] {
        fixture.record(gold, pred);
    }
    let fixture_err = (fixture.macro_f1() - 7.0 / 9.0).abs();

    let pass = max_err <= 1e-12 && fixture_err <= 1e-12;
    verdict(
        8,
        "metric-oracle",
        pass,
        &format!(
            "1000 random confusions max err {max_err:.3e} (tol 1e-12), 7/9 fixture err {fixture_err:.3e}"
        ),
    );
}

/// gen-synth -> pretrain -> train -> eval through the installed binary,
/// returning the eval stdout, both log files, and the stage-2 checkpoint.
fn pipeline(dir: &Path) -> (String, String, String, Vec<u8>, PathBuf) {
    let bin = env!("CARGO_BIN_EXE_mgan");
    let out = dir.join("out");
    let cfg_path = dir.join("run.config");
    std::fs::write(
        &cfg_path,
        format!(
            "out_dir = {}\n\
             seed = 11\n\
             d_w = 10\nd_h = 6\nd_u = 5\nfc_dim = 7\n\
             batch_source = 8\nbatch_target = 8\n\
             max_epochs = 2\nmax_steps = 6\neval_every = 3\npatience = 5\n\
             min_count = 1\n\
             synth_categories = 2\nsynth_source_train = 32\nsynth_source_eval = 8\n\
             synth_target_train = 24\nsynth_target_test = 8\n",
            out.display()
        ),
    )
    .unwrap();

    let run = |args: &[&str]| -> String {
        let output = Command::new(bin).args(args).output().expect("binary runs");
        assert!(
            output.status.success(),
            "`mgan {}` failed:\n{}",
            args.join(" "),
            String::from_utf8_lossy(&output.stderr)
        );
        String::from_utf8(output.stdout).unwrap()
    };

    let cfg = cfg_path.to_str().unwrap().to_string();
    run(&["gen-synth", "--config", &cfg]);
    run(&["pretrain", "--config", &cfg]);
    let stage1 = out.join("stage1.ckpt");
    run(&[
        "train",
        "--config",
        &cfg,
        "--from",
        stage1.to_str().unwrap(),
    ]);
    let stage2 = out.join("stage2.ckpt");
    let eval_out = run(&[
        "eval",
        "--checkpoint",
        stage2.to_str().unwrap(),
        "--corpus",
        out.join("target_test.jsonl").to_str().unwrap(),
    ]);
    let pretrain_log = std::fs::read_to_string(out.join("pretrain.log")).unwrap();
    let train_log = std::fs::read_to_string(out.join("train.log")).unwrap();
    let ckpt = std::fs::read(&stage2).unwrap();
    (eval_out, pretrain_log, train_log, ckpt, stage2)
}

#[test]
fn c9_reproducibility() {
    let start = Instant::now();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let a = pipeline(dir_a.path());
    let b = pipeline(dir_b.path());

    let metrics_match = a.0 == b.0 && a.0.starts_with("accuracy=") && a.0.contains("macro_f1=");
    let logs_match = a.1 == b.1 && a.2 == b.2;
    let checkpoints_match = a.3 == b.3;

    // A loaded checkpoint saved again must reproduce the file byte-for-byte.
    let ck = load_checkpoint(&a.4).unwrap();
    let resaved = dir_a.path().join("resaved.ckpt");
    save_checkpoint(&ck, &resaved).unwrap();
    let round_trip = std::fs::read(&resaved).unwrap() == a.3;

    let pass = metrics_match && logs_match && checkpoints_match && round_trip;
    verdict(
        9,
        "reproducibility",
        pass,
        &format!(
            "metric lines {} [{}], logs {}, checkpoints {} ({} bytes), round-trip {}, {:.1?}",
            if metrics_match { "identical" } else { "DIFFER" },
            a.0.replace('\n', " ").trim(),
            if logs_match { "identical" } else { "DIFFER" },
            if checkpoints_match {
                "identical"
            } else {
                "DIFFER"
            },
            a.3.len(),
            if round_trip { "exact" } else { "DIFFER" },
            start.elapsed()
        ),
    );
}
