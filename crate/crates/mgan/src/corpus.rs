//! Corpus data model and file formats.
//!
//! A corpus file is UTF-8 JSON lines: a header object declaring the kind
//! ("source" or "target") and the category set, then one flat object per
//! example. Coarse-grained (source) records carry the aspect words, a
//! category, and a sentiment; fine-grained (target) records carry the aspect
//! span over the context tokens and a sentiment.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fnv1a, Rng};
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

pub const SENTIMENTS: [Sentiment; 3] =
    [Sentiment::Positive, Sentiment::Neutral, Sentiment::Negative];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sentiment {
    Positive = 0,
    Neutral = 1,
    Negative = 2,
}

impl Sentiment {
    pub fn from_str(s: &str) -> Option<Sentiment> {
        match s {
            "positive" => Some(Sentiment::Positive),
            "neutral" => Some(Sentiment::Neutral),
            "negative" => Some(Sentiment::Negative),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Positive => "positive",
            Sentiment::Neutral => "neutral",
            Sentiment::Negative => "negative",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Sentiment> {
        SENTIMENTS.get(i).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusKind {
    Source,
    Target,
}

impl CorpusKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CorpusKind::Source => "source",
            CorpusKind::Target => "target",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceExample {
    pub context: Vec<String>,
    pub aspect_words: Vec<String>,
    pub category_id: usize,
    pub sentiment: Sentiment,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetExample {
    pub context: Vec<String>,
    pub span_start: usize,
    pub span_len: usize,
    pub sentiment: Sentiment,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Corpus {
    Source {
        categories: Vec<String>,
        examples: Vec<SourceExample>,
    },
    Target {
        examples: Vec<TargetExample>,
    },
}

impl Corpus {
    pub fn kind(&self) -> CorpusKind {
        match self {
            Corpus::Source { .. } => CorpusKind::Source,
            Corpus::Target { .. } => CorpusKind::Target,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Corpus::Source { examples, .. } => examples.len(),
            Corpus::Target { examples } => examples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn source_examples(&self) -> Result<(&[String], &[SourceExample])> {
        match self {
            Corpus::Source {
                categories,
                examples,
            } => Ok((categories, examples)),
            Corpus::Target { .. } => Err(Error::Validation(
                "expected a coarse-grained (source) corpus".into(),
            )),
        }
    }

    pub fn target_examples(&self) -> Result<&[TargetExample]> {
        match self {
            Corpus::Target { examples } => Ok(examples),
            Corpus::Source { .. } => Err(Error::Validation(
                "expected a fine-grained (target) corpus".into(),
            )),
        }
    }

    /// Every token of every example, in corpus order. Aspect words count.
    pub fn tokens(&self) -> Vec<&str> {
        let mut out = Vec::new();
        match self {
            Corpus::Source { examples, .. } => {
                for ex in examples {
                    out.extend(ex.context.iter().map(|s| s.as_str()));
                    out.extend(ex.aspect_words.iter().map(|s| s.as_str()));
                }
            }
            Corpus::Target { examples } => {
                for ex in examples {
                    out.extend(ex.context.iter().map(|s| s.as_str()));
                }
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    kind: String,
    categories: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SourceLine {
    context: Vec<String>,
    aspect: Vec<String>,
    category: String,
    sentiment: String,
}

#[derive(Serialize, Deserialize)]
struct TargetLine {
    context: Vec<String>,
    span_start: usize,
    span_len: usize,
    sentiment: String,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

pub fn load_corpus(path: &Path, expected: CorpusKind) -> Result<Corpus> {
    require_file(path)?;
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let (_, header_raw) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file, expected a header line"))?;
    let header: HeaderLine = serde_json::from_str(header_raw)
        .map_err(|e| parse_err(path, 1, format!("bad header: {e}")))?;
    let kind = match header.kind.as_str() {
        "source" => CorpusKind::Source,
        "target" => CorpusKind::Target,
        other => return Err(parse_err(path, 1, format!("unknown corpus kind `{other}`"))),
    };
    if kind != expected {
        return Err(Error::Validation(format!(
            "{}: corpus kind is `{}`, expected `{}`",
            path.display(),
            kind.as_str(),
            expected.as_str()
        )));
    }

    match kind {
        CorpusKind::Source => {
            let categories = header.categories;
            if categories.is_empty() {
                return Err(parse_err(path, 1, "source header declares no categories"));
            }
            let mut examples = Vec::new();
            for (i, raw) in lines {
                if raw.trim().is_empty() {
                    continue;
                }
                let lineno = i + 1;
                let rec: SourceLine = serde_json::from_str(raw)
                    .map_err(|e| parse_err(path, lineno, e.to_string()))?;
                if rec.context.is_empty() {
                    return Err(parse_err(path, lineno, "empty context"));
                }
                if rec.aspect.is_empty() {
                    return Err(parse_err(path, lineno, "empty aspect word list"));
                }
                let category_id = categories
                    .iter()
                    .position(|c| *c == rec.category)
                    .ok_or_else(|| {
                        parse_err(
                            path,
                            lineno,
                            format!("category `{}` not in header set", rec.category),
                        )
                    })?;
                let sentiment = Sentiment::from_str(&rec.sentiment).ok_or_else(|| {
                    parse_err(
                        path,
                        lineno,
                        format!("unknown sentiment `{}`", rec.sentiment),
                    )
                })?;
                examples.push(SourceExample {
                    context: rec.context,
                    aspect_words: rec.aspect,
                    category_id,
                    sentiment,
                });
            }
            Ok(Corpus::Source {
                categories,
                examples,
            })
        }
        CorpusKind::Target => {
            let mut examples = Vec::new();
            for (i, raw) in lines {
                if raw.trim().is_empty() {
                    continue;
                }
                let lineno = i + 1;
                let rec: TargetLine = serde_json::from_str(raw)
                    .map_err(|e| parse_err(path, lineno, e.to_string()))?;
                let n = rec.context.len();
                if n == 0 {
                    return Err(parse_err(path, lineno, "empty context"));
                }
                if rec.span_len == 0 {
                    return Err(parse_err(path, lineno, "aspect span must be non-empty"));
                }
                if rec.span_start + rec.span_len > n {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!(
                            "span [{}, {}) exceeds sentence length {n}",
                            rec.span_start,
                            rec.span_start + rec.span_len
                        ),
                    ));
                }
                let sentiment = Sentiment::from_str(&rec.sentiment).ok_or_else(|| {
                    parse_err(
                        path,
                        lineno,
                        format!("unknown sentiment `{}`", rec.sentiment),
                    )
                })?;
                examples.push(TargetExample {
                    context: rec.context,
                    span_start: rec.span_start,
                    span_len: rec.span_len,
                    sentiment,
                });
            }
            Ok(Corpus::Target { examples })
        }
    }
}

/// Loads a corpus of whichever kind its header declares.
pub fn load_corpus_auto(path: &Path) -> Result<Corpus> {
    require_file(path)?;
    let text = fs::read_to_string(path)?;
    let header_raw = text
        .lines()
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file, expected a header line"))?;
    let header: HeaderLine = serde_json::from_str(header_raw)
        .map_err(|e| parse_err(path, 1, format!("bad header: {e}")))?;
    let kind = match header.kind.as_str() {
        "source" => CorpusKind::Source,
        "target" => CorpusKind::Target,
        other => return Err(parse_err(path, 1, format!("unknown corpus kind `{other}`"))),
    };
    load_corpus(path, kind)
}

pub fn corpus_to_string(corpus: &Corpus) -> String {
    let mut out = String::new();
    match corpus {
        Corpus::Source {
            categories,
            examples,
        } => {
            let header = HeaderLine {
                kind: "source".into(),
                categories: categories.clone(),
            };
            out.push_str(&serde_json::to_string(&header).expect("header serializes"));
            out.push('\n');
            for ex in examples {
                let line = SourceLine {
                    context: ex.context.clone(),
                    aspect: ex.aspect_words.clone(),
                    category: categories[ex.category_id].clone(),
                    sentiment: ex.sentiment.as_str().into(),
                };
                out.push_str(&serde_json::to_string(&line).expect("record serializes"));
                out.push('\n');
            }
        }
        Corpus::Target { examples } => {
            let header = HeaderLine {
                kind: "target".into(),
                categories: Vec::new(),
            };
            out.push_str(&serde_json::to_string(&header).expect("header serializes"));
            out.push('\n');
            for ex in examples {
                let line = TargetLine {
                    context: ex.context.clone(),
                    span_start: ex.span_start,
                    span_len: ex.span_len,
                    sentiment: ex.sentiment.as_str().into(),
                };
                out.push_str(&serde_json::to_string(&line).expect("record serializes"));
                out.push('\n');
            }
        }
    }
    out
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    atomic_write(path, corpus_to_string(corpus).as_bytes())
}

/// Write via a temp file in the same directory plus rename, so a crash never
/// leaves a half-written artifact at the destination.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
    }
    let stem = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp: PathBuf = match dir {
        Some(d) => d.join(format!(".{stem}.tmp")),
        None => PathBuf::from(format!(".{stem}.tmp")),
    };
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

// ── Vocabulary ───────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocab {
    /// Ids 0 and 1 are reserved for padding and unknown. Remaining tokens
    /// are ordered by descending frequency, ties broken lexicographically,
    /// so the mapping is deterministic for a given token stream.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(tokens: I, min_count: usize) -> Vocab {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for tok in tokens {
            *counts.entry(tok).or_insert(0) += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut id_to_token = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        id_to_token.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            id_to_token,
            token_to_id,
        }
    }

    pub fn from_tokens(id_to_token: Vec<String>) -> Result<Vocab> {
        if id_to_token.len() < 2
            || id_to_token[PAD_ID] != PAD_TOKEN
            || id_to_token[UNK_ID] != UNK_TOKEN
        {
            return Err(Error::Validation(
                "vocabulary must start with the padding and unknown tokens".into(),
            ));
        }
        let token_to_id: HashMap<String, usize> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        if token_to_id.len() != id_to_token.len() {
            return Err(Error::Validation("vocabulary contains duplicates".into()));
        }
        Ok(Vocab {
            id_to_token,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        *self.token_to_id.get(token).unwrap_or(&UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Order-sensitive fingerprint of the id -> token mapping.
    pub fn hash(&self) -> u64 {
        let joined = self.id_to_token.join("\n");
        fnv1a(joined.as_bytes())
    }
}

// ── Pretrained embeddings ────────────────────────────────────────────────

#[derive(Debug)]
pub struct EmbeddingLoad {
    pub table: Tensor,
    pub covered: usize,
}

/// Text embedding file: one line per token, `token v1 v2 ... v_dim`,
/// whitespace separated. In-vocabulary rows are copied; everything else in
/// the table is drawn from the usual uniform init. The padding row is
/// all zeros.
pub fn load_embeddings(
    path: &Path,
    vocab: &Vocab,
    dim: usize,
    rng: &mut Rng,
) -> Result<EmbeddingLoad> {
    require_file(path)?;
    let text = fs::read_to_string(path)?;

    let mut table = crate::tensor::init_uniform(vec![vocab.len(), dim], rng);
    for j in 0..dim {
        table.data_mut()[PAD_ID * dim + j] = 0.0;
    }

    let mut covered = 0usize;
    let mut seen = vec![false; vocab.len()];
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let mut parts = raw.split_whitespace();
        let token = parts
            .next()
            .ok_or_else(|| parse_err(path, lineno, "missing token"))?;
        let values: Vec<&str> = parts.collect();
        if values.len() != dim {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {dim} values after token, found {}", values.len()),
            ));
        }
        let id = match vocab.token_to_id.get(token) {
            Some(&id) if id != PAD_ID && id != UNK_ID => id,
            _ => continue,
        };
        for (j, v) in values.iter().enumerate() {
            let x: f64 = v
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("bad number `{v}`")))?;
            table.data_mut()[id * dim + j] = x;
        }
        if !seen[id] {
            seen[id] = true;
            covered += 1;
        }
    }
    Ok(EmbeddingLoad { table, covered })
}

// ── Batching ─────────────────────────────────────────────────────────────

/// Fixed-size minibatch with context ids padded to the batch max length.
/// Aspect fields are present only for the corpus kind that has them.
#[derive(Clone, Debug)]
pub struct Batch {
    pub context_ids: Vec<Vec<usize>>,
    pub context_mask: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
    pub sentiments: Vec<Sentiment>,
    pub aspect_ids: Option<Vec<Vec<usize>>>,
    pub aspect_mask: Option<Vec<Vec<bool>>>,
    pub aspect_lengths: Option<Vec<usize>>,
    pub category_ids: Option<Vec<usize>>,
    pub spans: Option<Vec<(usize, usize)>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// Context ids of example `i`, truncated to the true length.
    pub fn context_of(&self, i: usize) -> &[usize] {
        &self.context_ids[i][..self.lengths[i]]
    }

    pub fn aspect_of(&self, i: usize) -> &[usize] {
        let ids = self.aspect_ids.as_ref().expect("aspect ids present");
        let len = self.aspect_lengths.as_ref().expect("aspect lengths")[i];
        &ids[i][..len]
    }
}

fn pad_ids(rows: Vec<Vec<usize>>) -> (Vec<Vec<usize>>, Vec<Vec<bool>>, Vec<usize>) {
    let max = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut padded = Vec::with_capacity(rows.len());
    let mut masks = Vec::with_capacity(rows.len());
    let mut lens = Vec::with_capacity(rows.len());
    for r in rows {
        let n = r.len();
        let mut ids = r;
        ids.resize(max, PAD_ID);
        let mut mask = vec![true; n];
        mask.resize(max, false);
        padded.push(ids);
        masks.push(mask);
        lens.push(n);
    }
    (padded, masks, lens)
}

fn batch_order(n: usize, rng: &mut Rng, shuffle: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if shuffle {
        rng.shuffle(&mut idx);
    }
    idx
}

/// Every example appears in exactly one batch; the last batch may be short.
pub fn batches_source(
    examples: &[SourceExample],
    vocab: &Vocab,
    batch_size: usize,
    rng: &mut Rng,
    shuffle: bool,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Validation("batch size must be positive".into()));
    }
    let order = batch_order(examples.len(), rng, shuffle);
    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        let ctx: Vec<Vec<usize>> = chunk
            .iter()
            .map(|&i| vocab.encode(&examples[i].context))
            .collect();
        let asp: Vec<Vec<usize>> = chunk
            .iter()
            .map(|&i| vocab.encode(&examples[i].aspect_words))
            .collect();
        let (context_ids, context_mask, lengths) = pad_ids(ctx);
        let (aspect_ids, aspect_mask, aspect_lengths) = pad_ids(asp);
        out.push(Batch {
            context_ids,
            context_mask,
            lengths,
            sentiments: chunk.iter().map(|&i| examples[i].sentiment).collect(),
            aspect_ids: Some(aspect_ids),
            aspect_mask: Some(aspect_mask),
            aspect_lengths: Some(aspect_lengths),
            category_ids: Some(chunk.iter().map(|&i| examples[i].category_id).collect()),
            spans: None,
        });
    }
    Ok(out)
}

pub fn batches_target(
    examples: &[TargetExample],
    vocab: &Vocab,
    batch_size: usize,
    rng: &mut Rng,
    shuffle: bool,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Validation("batch size must be positive".into()));
    }
    let order = batch_order(examples.len(), rng, shuffle);
    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        let ctx: Vec<Vec<usize>> = chunk
            .iter()
            .map(|&i| vocab.encode(&examples[i].context))
            .collect();
        let (context_ids, context_mask, lengths) = pad_ids(ctx);
        out.push(Batch {
            context_ids,
            context_mask,
            lengths,
            sentiments: chunk.iter().map(|&i| examples[i].sentiment).collect(),
            aspect_ids: None,
            aspect_mask: None,
            aspect_lengths: None,
            category_ids: None,
            spans: Some(
                chunk
                    .iter()
                    .map(|&i| (examples[i].span_start, examples[i].span_len))
                    .collect(),
            ),
        });
    }
    Ok(out)
}
