//! Dataset ingestion, tokenization, vocabulary and padded batching.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Two raw texts and a label; `group_id` ties ranking candidates to a query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPair {
    pub text_a: String,
    pub text_b: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<String>,
}

impl TextPair {
    pub fn new(text_a: impl Into<String>, text_b: impl Into<String>, label: usize) -> Self {
        Self {
            text_a: text_a.into(),
            text_b: text_b.into(),
            label,
            group_id: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedExample {
    pub tokens_a: Vec<usize>,
    pub tokens_b: Vec<usize>,
    pub label: usize,
    pub group_id: Option<String>,
}

/// Lowercases, splits on every non-alphanumeric character and drops what is
/// left of symbol or emoji runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from explicit tokens; indices start at 2.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens: all, index })
    }

    /// Tokens seen at least `min_count` times, ordered by descending count
    /// then lexicographically.
    pub fn build<'a, I>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a TextPair>,
    {
        if min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut pairs = 0usize;
        for pair in corpus {
            pairs += 1;
            for t in tokenize(&pair.text_a).into_iter().chain(tokenize(&pair.text_b)) {
                *counts.entry(t).or_default() += 1;
            }
        }
        if pairs == 0 {
            return Err(Error::Empty("vocabulary corpus"));
        }
        let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn lookup(&self, token: &str) -> usize {
        match self.get(token) {
            Some(PAD) | None => UNK,
            Some(i) => i,
        }
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.lookup(t)).collect()
    }

    pub fn decode(&self, indices: &[usize]) -> Vec<String> {
        indices
            .iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }

    /// One token per line; line `k` holds index `k + 2`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[2..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_text().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// SHA-256 of the persisted text form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn tokenize_pair(&self, pair: &TextPair) -> Result<TokenizedExample> {
        let tokens_a = self.encode(&pair.text_a);
        let tokens_b = self.encode(&pair.text_b);
        if tokens_a.is_empty() {
            return Err(Error::Empty("text_a after tokenization"));
        }
        if tokens_b.is_empty() {
            return Err(Error::Empty("text_b after tokenization"));
        }
        Ok(TokenizedExample {
            tokens_a,
            tokens_b,
            label: pair.label,
            group_id: pair.group_id.clone(),
        })
    }
}

#[derive(Deserialize)]
struct RawPair {
    text_a: Option<String>,
    text_b: Option<String>,
    label: Option<serde_json::Value>,
    group_id: Option<serde_json::Value>,
}

fn parse_line(line: &str) -> std::result::Result<TextPair, String> {
    let raw: RawPair = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let text_a = raw.text_a.ok_or("missing field `text_a`")?;
    let text_b = raw.text_b.ok_or("missing field `text_b`")?;
    let label = raw.label.ok_or("missing field `label`")?;
    let label = label
        .as_u64()
        .ok_or_else(|| format!("label must be a non-negative integer, got {label}"))? as usize;
    let group_id = match raw.group_id {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) => Some(s),
        Some(serde_json::Value::Number(n)) => Some(n.to_string()),
        Some(other) => return Err(format!("group_id must be a string or number, got {other}")),
    };
    Ok(TextPair {
        text_a,
        text_b,
        label,
        group_id,
    })
}

/// Streams pairs from a JSON-lines file in file order. Blank lines are skipped.
pub fn load_jsonl(path: &Path) -> Result<impl Iterator<Item = Result<TextPair>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let path = path.to_path_buf();
    Ok(BufReader::new(file).lines().enumerate().filter_map(move |(i, line)| {
        let line = match line {
            Ok(l) => l,
            Err(e) => return Some(Err(Error::io(&path, e))),
        };
        if line.trim().is_empty() {
            return None;
        }
        Some(parse_line(&line).map_err(|message| Error::Line {
            path: path.clone(),
            line: i + 1,
            message,
        }))
    }))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TextPair>> {
    load_jsonl(path)?.collect()
}

pub fn write_jsonl(path: &Path, pairs: &[TextPair]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p).expect("TextPair serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One padded side of a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedSide {
    /// `rows x width`, padded with [`PAD`].
    pub ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
}

impl PaddedSide {
    fn from_sequences<'a>(seqs: impl Iterator<Item = &'a Vec<usize>> + Clone) -> Self {
        let width = seqs.clone().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::new();
        let mut mask = Vec::new();
        for s in seqs {
            let mut row = s.clone();
            row.resize(width, PAD);
            ids.push(row);
            mask.push((0..width).map(|i| i < s.len()).collect());
        }
        Self { ids, mask }
    }

    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    /// Unpadded sequence for one row.
    pub fn sequence(&self, row: usize) -> Vec<usize> {
        self.ids[row]
            .iter()
            .zip(&self.mask[row])
            .filter(|(_, &m)| m)
            .map(|(&i, _)| i)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Positions of the examples in the input slice.
    pub indices: Vec<usize>,
    pub side_a: PaddedSide,
    pub side_b: PaddedSide,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn from_examples(examples: &[TokenizedExample], indices: Vec<usize>) -> Self {
        let a = indices.iter().map(|&i| &examples[i].tokens_a);
        let b = indices.iter().map(|&i| &examples[i].tokens_b);
        Self {
            side_a: PaddedSide::from_sequences(a),
            side_b: PaddedSide::from_sequences(b),
            labels: indices.iter().map(|&i| examples[i].label).collect(),
            indices,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batches {
    pub batches: Vec<Batch>,
    /// Example positions dropped from the tail.
    pub dropped: Vec<usize>,
}

/// Deterministic example order for a seed; `None` keeps input order.
pub fn batch_order(n: usize, shuffle_seed: Option<u64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

/// Splits examples into padded batches. With `mi_enabled` the batch size
/// must be at least 2 and a tail batch of one example is dropped.
pub fn make_batches(
    examples: &[TokenizedExample],
    batch_size: usize,
    shuffle_seed: Option<u64>,
    mi_enabled: bool,
) -> Result<Batches> {
    if batch_size == 0 || (mi_enabled && batch_size < 2) {
        return Err(Error::Config(format!(
            "batch_size {batch_size} is too small{}",
            if mi_enabled {
                " for negative sampling (need >= 2)"
            } else {
                ""
            }
        )));
    }
    let order = batch_order(examples.len(), shuffle_seed);
    let mut batches = Vec::new();
    let mut dropped = Vec::new();
    for chunk in order.chunks(batch_size) {
        if mi_enabled && chunk.len() < 2 {
            dropped.extend_from_slice(chunk);
            continue;
        }
        batches.push(Batch::from_examples(examples, chunk.to_vec()));
    }
    Ok(Batches { batches, dropped })
}
