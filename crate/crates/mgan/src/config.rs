//! Run configuration: the hyperparameter record with its reference defaults
//! and the flat `key = value` config file format. Every run persists its
//! fully resolved configuration next to its outputs so results can be
//! reproduced from the artifacts alone.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::synth::SynthSettings;

#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparams {
    /// Word embedding width; also the aspect-representation width.
    pub d_w: usize,
    /// LSTM hidden size per direction.
    pub d_h: usize,
    /// Attention scorer hidden size.
    pub d_u: usize,
    /// Classifier hidden layer width.
    pub fc_dim: usize,
    /// Weight of the alignment loss.
    pub lambda: f64,
    /// Weight of the l2 penalty.
    pub rho: f64,
    /// Separation margin of the contrastive loss.
    pub margin: f64,
    pub learning_rate: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub batch_source: usize,
    pub batch_target: usize,
    /// Dropout rate on context word embeddings during training.
    pub dropout: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            d_w: 200,
            d_h: 150,
            d_u: 100,
            fc_dim: 300,
            lambda: 0.1,
            rho: 1e-6,
            margin: 1.0,
            learning_rate: 1e-4,
            clip_norm: 40.0,
            batch_source: 64,
            batch_target: 32,
            dropout: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// Corpus paths; when unset they resolve to conventional names inside
    /// out_dir, which is where gen-synth writes them.
    pub source_train: Option<PathBuf>,
    pub source_eval: Option<PathBuf>,
    pub target_train: Option<PathBuf>,
    pub target_test: Option<PathBuf>,
    /// Optional pretrained embedding file; absent means all rows are
    /// randomly initialized.
    pub embeddings: Option<PathBuf>,
    pub seed: u64,
    pub hp: Hyperparams,
    /// Held-out fraction for validation, in both stages.
    pub val_fraction: f64,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Stage-1 epoch cap.
    pub max_epochs: usize,
    /// Stage-2 iteration cap (one source step + one target step each).
    pub max_steps: usize,
    /// Stage-2 validation cadence in iterations.
    pub eval_every: usize,
    /// Minimum token frequency for a vocabulary entry.
    pub min_count: usize,
    /// When true, each alternating step treats the other network's
    /// representations as constants.
    pub cfa_gradient_isolation: bool,
    /// When true, the target position-relevance zero band covers span_len+1
    /// slots as published; false uses the exact span.
    pub literal_position_band: bool,
    pub synth: SynthSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("out"),
            source_train: None,
            source_eval: None,
            target_train: None,
            target_test: None,
            embeddings: None,
            seed: 7,
            hp: Hyperparams::default(),
            val_fraction: 0.1,
            patience: 10,
            max_epochs: 200,
            max_steps: 4000,
            eval_every: 20,
            min_count: 1,
            cfa_gradient_isolation: true,
            literal_position_band: true,
            synth: SynthSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn source_train_path(&self) -> PathBuf {
        self.source_train
            .clone()
            .unwrap_or_else(|| self.out_dir.join("source_train.jsonl"))
    }

    pub fn source_eval_path(&self) -> PathBuf {
        self.source_eval
            .clone()
            .unwrap_or_else(|| self.out_dir.join("source_eval.jsonl"))
    }

    pub fn target_train_path(&self) -> PathBuf {
        self.target_train
            .clone()
            .unwrap_or_else(|| self.out_dir.join("target_train.jsonl"))
    }

    pub fn target_test_path(&self) -> PathBuf {
        self.target_test
            .clone()
            .unwrap_or_else(|| self.out_dir.join("target_test.jsonl"))
    }

    /// The planted-term manifest sits next to its corpus.
    pub fn manifest_path(corpus: &Path) -> PathBuf {
        corpus.with_extension("manifest")
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(key: &str, v: usize) -> Result<()> {
            if v == 0 {
                return Err(Error::Config {
                    key: key.into(),
                    msg: "must be positive".into(),
                });
            }
            Ok(())
        }
        positive("d_w", self.hp.d_w)?;
        positive("d_h", self.hp.d_h)?;
        positive("d_u", self.hp.d_u)?;
        positive("fc_dim", self.hp.fc_dim)?;
        positive("batch_source", self.hp.batch_source)?;
        positive("batch_target", self.hp.batch_target)?;
        positive("patience", self.patience)?;
        positive("max_epochs", self.max_epochs)?;
        positive("max_steps", self.max_steps)?;
        positive("eval_every", self.eval_every)?;
        positive("min_count", self.min_count)?;
        for (key, v) in [
            ("lambda", self.hp.lambda),
            ("rho", self.hp.rho),
            ("margin", self.hp.margin),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config {
                    key: key.into(),
                    msg: "must be a finite nonnegative number".into(),
                });
            }
        }
        if !(self.hp.learning_rate > 0.0) || !self.hp.learning_rate.is_finite() {
            return Err(Error::Config {
                key: "learning_rate".into(),
                msg: "must be positive".into(),
            });
        }
        if !(self.hp.clip_norm > 0.0) || !self.hp.clip_norm.is_finite() {
            return Err(Error::Config {
                key: "clip_norm".into(),
                msg: "must be positive".into(),
            });
        }
        if !(0.0..1.0).contains(&self.hp.dropout) {
            return Err(Error::Config {
                key: "dropout".into(),
                msg: "must lie in [0, 1)".into(),
            });
        }
        if !(0.0 < self.val_fraction && self.val_fraction < 1.0) {
            return Err(Error::Config {
                key: "val_fraction".into(),
                msg: "must lie in (0, 1)".into(),
            });
        }
        Ok(())
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|_| Error::Config {
        key: key.into(),
        msg: format!("expected a nonnegative integer, got `{value}`"),
    })
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value.parse().map_err(|_| Error::Config {
        key: key.into(),
        msg: format!("expected a nonnegative integer, got `{value}`"),
    })
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value.parse().map_err(|_| Error::Config {
        key: key.into(),
        msg: format!("expected a number, got `{value}`"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config {
            key: key.into(),
            msg: format!("expected true or false, got `{value}`"),
        }),
    }
}

fn apply_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "out_dir" => cfg.out_dir = PathBuf::from(value),
        "source_train" => cfg.source_train = Some(PathBuf::from(value)),
        "source_eval" => cfg.source_eval = Some(PathBuf::from(value)),
        "target_train" => cfg.target_train = Some(PathBuf::from(value)),
        "target_test" => cfg.target_test = Some(PathBuf::from(value)),
        "embeddings" => cfg.embeddings = Some(PathBuf::from(value)),
        "seed" => cfg.seed = parse_u64(key, value)?,
        "d_w" => cfg.hp.d_w = parse_usize(key, value)?,
        "d_h" => cfg.hp.d_h = parse_usize(key, value)?,
        "d_u" => cfg.hp.d_u = parse_usize(key, value)?,
        "fc_dim" => cfg.hp.fc_dim = parse_usize(key, value)?,
        "lambda" => cfg.hp.lambda = parse_f64(key, value)?,
        "rho" => cfg.hp.rho = parse_f64(key, value)?,
        "margin" => cfg.hp.margin = parse_f64(key, value)?,
        "learning_rate" => cfg.hp.learning_rate = parse_f64(key, value)?,
        "clip_norm" => cfg.hp.clip_norm = parse_f64(key, value)?,
        "batch_source" => cfg.hp.batch_source = parse_usize(key, value)?,
        "batch_target" => cfg.hp.batch_target = parse_usize(key, value)?,
        "dropout" => cfg.hp.dropout = parse_f64(key, value)?,
        "val_fraction" => cfg.val_fraction = parse_f64(key, value)?,
        "patience" => cfg.patience = parse_usize(key, value)?,
        "max_epochs" => cfg.max_epochs = parse_usize(key, value)?,
        "max_steps" => cfg.max_steps = parse_usize(key, value)?,
        "eval_every" => cfg.eval_every = parse_usize(key, value)?,
        "min_count" => cfg.min_count = parse_usize(key, value)?,
        "cfa_gradient_isolation" => cfg.cfa_gradient_isolation = parse_bool(key, value)?,
        "literal_position_band" => cfg.literal_position_band = parse_bool(key, value)?,
        "synth_categories" => cfg.synth.categories = parse_usize(key, value)?,
        "synth_source_train" => cfg.synth.source_train = parse_usize(key, value)?,
        "synth_source_eval" => cfg.synth.source_eval = parse_usize(key, value)?,
        "synth_target_train" => cfg.synth.target_train = parse_usize(key, value)?,
        "synth_target_test" => cfg.synth.target_test = parse_usize(key, value)?,
        "synth_contrastive_fraction" => cfg.synth.contrastive_fraction = parse_f64(key, value)?,
        _ => {
            return Err(Error::Config {
                key: key.into(),
                msg: "unknown key".into(),
            })
        }
    }
    Ok(())
}

/// Lines are `key = value`; blank lines and `#` comments are skipped; a
/// repeated key keeps its last value. Unknown keys are rejected so typos
/// cannot silently fall back to defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
            key: line.to_string(),
            msg: "expected `key = value`".into(),
        })?;
        apply_key(&mut cfg, key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    crate::corpus::require_file(path)?;
    parse_config(&std::fs::read_to_string(path)?)
}

/// Renders every key with its final value, corpus paths resolved, in a
/// fixed order. The output parses back to an equivalent configuration.
pub fn render_config(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let mut line = |k: &str, v: String| {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    };
    line("out_dir", cfg.out_dir.display().to_string());
    line(
        "source_train",
        cfg.source_train_path().display().to_string(),
    );
    line("source_eval", cfg.source_eval_path().display().to_string());
    line(
        "target_train",
        cfg.target_train_path().display().to_string(),
    );
    line("target_test", cfg.target_test_path().display().to_string());
    if let Some(e) = &cfg.embeddings {
        line("embeddings", e.display().to_string());
    }
    line("seed", cfg.seed.to_string());
    line("d_w", cfg.hp.d_w.to_string());
    line("d_h", cfg.hp.d_h.to_string());
    line("d_u", cfg.hp.d_u.to_string());
    line("fc_dim", cfg.hp.fc_dim.to_string());
    line("lambda", cfg.hp.lambda.to_string());
    line("rho", cfg.hp.rho.to_string());
    line("margin", cfg.hp.margin.to_string());
    line("learning_rate", cfg.hp.learning_rate.to_string());
    line("clip_norm", cfg.hp.clip_norm.to_string());
    line("batch_source", cfg.hp.batch_source.to_string());
    line("batch_target", cfg.hp.batch_target.to_string());
    line("dropout", cfg.hp.dropout.to_string());
    line("val_fraction", cfg.val_fraction.to_string());
    line("patience", cfg.patience.to_string());
    line("max_epochs", cfg.max_epochs.to_string());
    line("max_steps", cfg.max_steps.to_string());
    line("eval_every", cfg.eval_every.to_string());
    line("min_count", cfg.min_count.to_string());
    line(
        "cfa_gradient_isolation",
        cfg.cfa_gradient_isolation.to_string(),
    );
    line(
        "literal_position_band",
        cfg.literal_position_band.to_string(),
    );
    line("synth_categories", cfg.synth.categories.to_string());
    line("synth_source_train", cfg.synth.source_train.to_string());
    line("synth_source_eval", cfg.synth.source_eval.to_string());
    line("synth_target_train", cfg.synth.target_train.to_string());
    line("synth_target_test", cfg.synth.target_test.to_string());
    line(
        "synth_contrastive_fraction",
        cfg.synth.contrastive_fraction.to_string(),
    );
    s
}

/// Persists the resolved configuration inside out_dir.
pub fn write_resolved(cfg: &RunConfig) -> Result<PathBuf> {
    let path = cfg.out_dir.join("resolved.config");
    crate::corpus::atomic_write(&path, render_config(cfg).as_bytes())?;
    Ok(path)
}
