//! Synthetic coarse-to-fine benchmark generator.
//!
//! Sentences come from shared templates with aspect-term and sentiment-cue
//! slots. Aspect terms are the only tokens correlated with a category, and
//! their surface forms are disjoint between the coarse (source) and
//! fine-grained (target) domains; sentiment cue words are shared between
//! domains, which is what makes transfer possible. Contrastive templates
//! place two aspects with different sentiments in one sentence, so
//! bag-of-cues shortcuts fail and the labeled aspect's position matters.
//!
//! Alongside each source corpus the generator emits a manifest with the
//! planted term's token index, one integer per example line. The manifest is
//! for attention evaluation only and is never visible to training.

use std::fs;
use std::path::Path;

use crate::corpus::{
    atomic_write, require_file, Corpus, Sentiment, SourceExample, TargetExample, SENTIMENTS,
};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct CategorySpec {
    pub name: String,
    /// Aspect words attached to coarse examples; never appear in sentences.
    pub descriptors: Vec<String>,
    /// Single-token surfaces planted in source sentences.
    pub source_terms: Vec<Vec<String>>,
    /// One- or two-token surfaces planted in target sentences.
    pub target_terms: Vec<Vec<String>>,
}

#[derive(Clone, Debug)]
pub struct SynthBank {
    pub categories: Vec<CategorySpec>,
    /// Cue lexicons indexed by Sentiment order: positive, neutral, negative.
    pub cues: [Vec<String>; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSettings {
    pub categories: usize,
    pub source_train: usize,
    pub source_eval: usize,
    pub target_train: usize,
    pub target_test: usize,
    pub contrastive_fraction: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            categories: 4,
            source_train: 5000,
            source_eval: 500,
            target_train: 200,
            target_test: 200,
            contrastive_fraction: 0.4,
        }
    }
}

#[derive(Debug)]
pub struct SynthOutput {
    pub source_train: Corpus,
    pub source_train_manifest: Vec<usize>,
    pub source_eval: Corpus,
    pub source_eval_manifest: Vec<usize>,
    pub target_train: Corpus,
    pub target_test: Corpus,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn terms(list: &[&[&str]]) -> Vec<Vec<String>> {
    list.iter().map(|t| words(t)).collect()
}

/// Built-in lexicons: a restaurant-flavored coarse domain and a
/// laptop-flavored fine-grained domain sharing one opinion vocabulary.
pub fn default_bank() -> SynthBank {
    SynthBank {
        categories: vec![
            CategorySpec {
                name: "food".into(),
                descriptors: words(&["food", "dishes"]),
                source_terms: terms(&[
                    &["salmon"],
                    &["tacos"],
                    &["pasta"],
                    &["sushi"],
                    &["steak"],
                    &["curry"],
                ]),
                target_terms: terms(&[
                    &["battery"],
                    &["charger"],
                    &["adapter"],
                    &["battery", "life"],
                ]),
            },
            CategorySpec {
                name: "service".into(),
                descriptors: words(&["service", "staff"]),
                source_terms: terms(&[
                    &["waiter"],
                    &["hostess"],
                    &["bartender"],
                    &["server"],
                    &["busboy"],
                    &["manager"],
                ]),
                target_terms: terms(&[
                    &["keyboard"],
                    &["trackpad"],
                    &["touchpad"],
                    &["keyboard", "backlight"],
                ]),
            },
            CategorySpec {
                name: "price".into(),
                descriptors: words(&["price", "value"]),
                source_terms: terms(&[
                    &["bill"],
                    &["prices"],
                    &["charge"],
                    &["cost"],
                    &["tab"],
                    &["surcharge"],
                ]),
                target_terms: terms(&[
                    &["screen"],
                    &["display"],
                    &["bezel"],
                    &["screen", "resolution"],
                ]),
            },
            CategorySpec {
                name: "ambience".into(),
                descriptors: words(&["ambience", "atmosphere"]),
                source_terms: terms(&[
                    &["decor"],
                    &["lighting"],
                    &["patio"],
                    &["seating"],
                    &["jukebox"],
                    &["vibe"],
                ]),
                target_terms: terms(&[
                    &["speakers"],
                    &["webcam"],
                    &["microphone"],
                    &["webcam", "cover"],
                ]),
            },
        ],
        cues: [
            words(&[
                "great",
                "tasty",
                "amazing",
                "excellent",
                "wonderful",
                "fantastic",
                "superb",
                "delightful",
                "perfect",
                "outstanding",
                "lovely",
                "brilliant",
                "stellar",
                "impressive",
                "solid",
                "crisp",
                "reliable",
                "smooth",
                "generous",
                "fresh",
            ]),
            words(&[
                "okay",
                "average",
                "standard",
                "typical",
                "ordinary",
                "acceptable",
                "fine",
                "plain",
                "usual",
                "unremarkable",
                "moderate",
                "fair",
                "passable",
                "tolerable",
                "middling",
                "adequate",
                "routine",
                "expected",
                "common",
                "unexceptional",
            ]),
            words(&[
                "terrible",
                "awful",
                "bland",
                "rude",
                "slow",
                "horrible",
                "disappointing",
                "stale",
                "noisy",
                "overpriced",
                "broken",
                "flimsy",
                "laggy",
                "dreadful",
                "mediocre",
                "soggy",
                "dirty",
                "cramped",
                "faulty",
                "harsh",
            ]),
        ],
    }
}

#[derive(Clone, Copy)]
enum Piece {
    W(&'static str),
    /// Aspect term slot k.
    T(usize),
    /// Sentiment cue slot k.
    C(usize),
}

struct Template {
    pieces: &'static [Piece],
    aspects: usize,
}

use Piece::{C, T, W};

const TEMPLATES_SIMPLE: [Template; 5] = [
    Template {
        pieces: &[W("the"), T(0), W("was"), C(0)],
        aspects: 1,
    },
    Template {
        pieces: &[
            W("i"),
            W("thought"),
            W("the"),
            T(0),
            W("was"),
            W("really"),
            C(0),
        ],
        aspects: 1,
    },
    Template {
        pieces: &[
            W("honestly"),
            W("the"),
            T(0),
            W("seemed"),
            C(0),
            W("to"),
            W("me"),
        ],
        aspects: 1,
    },
    Template {
        pieces: &[
            W("we"),
            W("found"),
            W("the"),
            T(0),
            W("quite"),
            C(0),
            W("overall"),
        ],
        aspects: 1,
    },
    Template {
        pieces: &[
            W("my"),
            W("friend"),
            W("said"),
            W("the"),
            T(0),
            W("is"),
            C(0),
        ],
        aspects: 1,
    },
];

const TEMPLATES_CONTRASTIVE: [Template; 3] = [
    Template {
        pieces: &[
            W("the"),
            T(0),
            W("was"),
            C(0),
            W("but"),
            W("the"),
            T(1),
            W("was"),
            C(1),
        ],
        aspects: 2,
    },
    Template {
        pieces: &[
            W("the"),
            T(0),
            W("seemed"),
            C(0),
            W("although"),
            W("the"),
            T(1),
            W("felt"),
            C(1),
        ],
        aspects: 2,
    },
    Template {
        pieces: &[
            W("while"),
            W("the"),
            T(0),
            W("was"),
            C(0),
            W("the"),
            T(1),
            W("stayed"),
            C(1),
        ],
        aspects: 2,
    },
];

fn validate(bank: &SynthBank, s: &SynthSettings) -> Result<()> {
    if s.categories < 2 || s.categories > bank.categories.len() {
        return Err(Error::Config {
            key: "synth_categories".into(),
            msg: format!(
                "must be between 2 and {} (the lexicon bank size), got {}",
                bank.categories.len(),
                s.categories
            ),
        });
    }
    if !(0.0..=1.0).contains(&s.contrastive_fraction) {
        return Err(Error::Config {
            key: "synth_contrastive_fraction".into(),
            msg: format!("must be in [0, 1], got {}", s.contrastive_fraction),
        });
    }
    for (key, v) in [
        ("synth_source_train", s.source_train),
        ("synth_source_eval", s.source_eval),
        ("synth_target_train", s.target_train),
        ("synth_target_test", s.target_test),
    ] {
        if v == 0 {
            return Err(Error::Config {
                key: key.into(),
                msg: "corpus size must be positive".into(),
            });
        }
    }

    let cats = &bank.categories[..s.categories];
    for (i, c) in cats.iter().enumerate() {
        if c.source_terms.is_empty() || c.target_terms.is_empty() || c.descriptors.is_empty() {
            return Err(Error::Config {
                key: "synth_categories".into(),
                msg: format!("category `{}` has an empty lexicon", c.name),
            });
        }
        for t in &c.source_terms {
            if t.len() != 1 {
                return Err(Error::Config {
                    key: "synth_categories".into(),
                    msg: format!(
                        "source term `{}` in `{}` must be a single token",
                        t.join(" "),
                        c.name
                    ),
                });
            }
        }
        // Term lexicons must be disjoint across categories; otherwise the
        // category is not identifiable from the planted term.
        for other in &cats[i + 1..] {
            for t in &c.source_terms {
                if other.source_terms.contains(t) {
                    return Err(Error::Config {
                        key: "synth_categories".into(),
                        msg: format!(
                            "source term `{}` appears in both `{}` and `{}`",
                            t.join(" "),
                            c.name,
                            other.name
                        ),
                    });
                }
            }
            for t in &c.target_terms {
                if other.target_terms.contains(t) {
                    return Err(Error::Config {
                        key: "synth_categories".into(),
                        msg: format!(
                            "target term `{}` appears in both `{}` and `{}`",
                            t.join(" "),
                            c.name,
                            other.name
                        ),
                    });
                }
            }
        }
    }
    Ok(())
}

struct Draw<'a> {
    /// Category per aspect slot; distinct across slots.
    cats: Vec<usize>,
    /// Sentiment per aspect slot; distinct across slots.
    sents: Vec<Sentiment>,
    /// Term tokens per aspect slot.
    terms: Vec<&'a [String]>,
    /// Cue token per aspect slot.
    cues: Vec<&'a str>,
    labeled: usize,
    template: &'static Template,
}

fn draw<'a>(
    bank: &'a SynthBank,
    n_cats: usize,
    contrastive_fraction: f64,
    source_side: bool,
    rng: &mut Rng,
) -> Draw<'a> {
    let contrastive = rng.next_f64() < contrastive_fraction;
    let template = if contrastive {
        &TEMPLATES_CONTRASTIVE[rng.below(TEMPLATES_CONTRASTIVE.len())]
    } else {
        &TEMPLATES_SIMPLE[rng.below(TEMPLATES_SIMPLE.len())]
    };
    let k = template.aspects;

    let mut cats = Vec::with_capacity(k);
    while cats.len() < k {
        let c = rng.below(n_cats);
        if !cats.contains(&c) {
            cats.push(c);
        }
    }
    let mut sents: Vec<Sentiment> = Vec::with_capacity(k);
    sents.push(SENTIMENTS[rng.below(3)]);
    while sents.len() < k {
        let s = SENTIMENTS[rng.below(3)];
        if s != sents[0] {
            sents.push(s);
        }
    }

    let terms: Vec<&[String]> = cats
        .iter()
        .map(|&c| {
            let spec = &bank.categories[c];
            let pool = if source_side {
                &spec.source_terms
            } else {
                &spec.target_terms
            };
            pool[rng.below(pool.len())].as_slice()
        })
        .collect();
    let cues: Vec<&str> = sents
        .iter()
        .map(|s| bank.cues[s.index()][rng.below(bank.cues[s.index()].len())].as_str())
        .collect();
    let labeled = rng.below(k);

    Draw {
        cats,
        sents,
        terms,
        cues,
        labeled,
        template,
    }
}

/// Expand the template; returns tokens plus (start, len) of each term slot.
fn assemble(d: &Draw) -> (Vec<String>, Vec<(usize, usize)>) {
    let mut tokens = Vec::new();
    let mut spans = vec![(0usize, 0usize); d.template.aspects];
    for piece in d.template.pieces {
        match piece {
            W(w) => tokens.push(w.to_string()),
            T(slot) => {
                spans[*slot] = (tokens.len(), d.terms[*slot].len());
                tokens.extend(d.terms[*slot].iter().cloned());
            }
            C(slot) => tokens.push(d.cues[*slot].to_string()),
        }
    }
    (tokens, spans)
}

fn gen_source(
    bank: &SynthBank,
    s: &SynthSettings,
    count: usize,
    rng: &mut Rng,
) -> (Vec<SourceExample>, Vec<usize>) {
    let mut examples = Vec::with_capacity(count);
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let d = draw(bank, s.categories, s.contrastive_fraction, true, rng);
        let (tokens, spans) = assemble(&d);
        let cat = d.cats[d.labeled];
        examples.push(SourceExample {
            context: tokens,
            aspect_words: bank.categories[cat].descriptors.clone(),
            category_id: cat,
            sentiment: d.sents[d.labeled],
        });
        manifest.push(spans[d.labeled].0);
    }
    (examples, manifest)
}

fn gen_target(
    bank: &SynthBank,
    s: &SynthSettings,
    count: usize,
    rng: &mut Rng,
) -> Vec<TargetExample> {
    let mut examples = Vec::with_capacity(count);
    for _ in 0..count {
        let d = draw(bank, s.categories, s.contrastive_fraction, false, rng);
        let (tokens, spans) = assemble(&d);
        let (start, len) = spans[d.labeled];
        examples.push(TargetExample {
            context: tokens,
            span_start: start,
            span_len: len,
            sentiment: d.sents[d.labeled],
        });
    }
    examples
}

pub fn generate(bank: &SynthBank, settings: &SynthSettings, seed: u64) -> Result<SynthOutput> {
    validate(bank, settings)?;
    let mut rng = Rng::derive(seed, "synth");
    let categories: Vec<String> = bank.categories[..settings.categories]
        .iter()
        .map(|c| c.name.clone())
        .collect();

    let (train_ex, train_manifest) = gen_source(bank, settings, settings.source_train, &mut rng);
    let (eval_ex, eval_manifest) = gen_source(bank, settings, settings.source_eval, &mut rng);
    let target_train = gen_target(bank, settings, settings.target_train, &mut rng);
    let target_test = gen_target(bank, settings, settings.target_test, &mut rng);

    Ok(SynthOutput {
        source_train: Corpus::Source {
            categories: categories.clone(),
            examples: train_ex,
        },
        source_train_manifest: train_manifest,
        source_eval: Corpus::Source {
            categories,
            examples: eval_ex,
        },
        source_eval_manifest: eval_manifest,
        target_train: Corpus::Target {
            examples: target_train,
        },
        target_test: Corpus::Target {
            examples: target_test,
        },
    })
}

pub fn write_manifest(manifest: &[usize], path: &Path) -> Result<()> {
    let mut text = String::new();
    for m in manifest {
        text.push_str(&m.to_string());
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

pub fn load_manifest(path: &Path) -> Result<Vec<usize>> {
    require_file(path)?;
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: usize = line.trim().parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("bad manifest index `{line}`"),
        })?;
        out.push(v);
    }
    Ok(out)
}
