//! Raw text to padded id sequences.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const OOV_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const OOV_TOKEN: &str = "<oov>";

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Token/id mapping with reserved ids 0 (PAD) and 1 (OOV).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
    max_size: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabRepr {
    tokens: Vec<String>,
    min_count: usize,
    max_size: Option<usize>,
}

impl TryFrom<VocabRepr> for Vocabulary {
    type Error = String;

    fn try_from(r: VocabRepr) -> Result<Self, String> {
        if r.tokens.len() < 2 || r.tokens[PAD_ID] != PAD_TOKEN || r.tokens[OOV_ID] != OOV_TOKEN {
            return Err("vocabulary must start with <pad>, <oov>".into());
        }
        let mut index = HashMap::with_capacity(r.tokens.len());
        for (i, t) in r.tokens.iter().enumerate().skip(2) {
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate vocabulary token {t:?}"));
            }
        }
        Ok(Vocabulary {
            tokens: r.tokens,
            index,
            min_count: r.min_count,
            max_size: r.max_size,
        })
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr {
            tokens: v.tokens,
            min_count: v.min_count,
            max_size: v.max_size,
        }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id for `token`, or [`OOV_ID`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(OOV_ID)
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn max_size(&self) -> Option<usize> {
        self.max_size
    }
}

/// Keeps tokens seen at least `min_count` times, ranked by frequency
/// (descending) then token text, and caps the vocabulary at `max_size`
/// entries including PAD and OOV.
pub fn build_vocab<S: AsRef<str>>(
    corpus: &[Vec<S>],
    min_count: usize,
    max_size: Option<usize>,
) -> Result<Vocabulary> {
    if min_count < 1 {
        return Err(Error::config("min_count", "must be >= 1"));
    }
    if matches!(max_size, Some(n) if n < 2) {
        return Err(Error::config("max_vocab", "must leave room for PAD and OOV"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for doc in corpus {
        for t in doc {
            *counts.entry(t.as_ref()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    if let Some(cap) = max_size {
        ranked.truncate(cap - 2);
    }
    let mut tokens = vec![PAD_TOKEN.to_string(), OOV_TOKEN.to_string()];
    tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
    let index = tokens
        .iter()
        .enumerate()
        .skip(2)
        .map(|(i, t)| (t.clone(), i))
        .collect();
    Ok(Vocabulary {
        tokens,
        index,
        min_count,
        max_size,
    })
}

/// Maps tokens to ids, keeps the first `max_len`, right-pads with PAD.
pub fn encode<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = tokens
        .iter()
        .take(max_len)
        .map(|t| vocab.id(t.as_ref()))
        .collect();
    ids.resize(max_len, PAD_ID);
    ids
}

// ── Labelled data ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub text: String,
    pub label: String,
    /// Token offsets of planted class keywords (synthetic corpora only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal_positions: Option<Vec<usize>>,
}

impl Example {
    pub fn new(text: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            label: label.into(),
            signal_positions: None,
        }
    }
}

/// Sorted class names; a label's index is its rank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelMap(Vec<String>);

impl LabelMap {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v: Vec<String> = labels.into_iter().map(str::to_string).collect();
        v.sort();
        v.dedup();
        LabelMap(v)
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.0.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.0.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    labels: LabelMap,
    classes: Vec<usize>,
    encoded: Option<Vec<Vec<usize>>>,
}

impl Dataset {
    /// Label map derived from the examples themselves.
    pub fn new(examples: Vec<Example>) -> Self {
        let labels = LabelMap::from_labels(examples.iter().map(|e| e.label.as_str()));
        Self::with_labels(examples, labels).expect("labels drawn from examples")
    }

    /// Uses a fixed label map; unknown labels are a data error.
    pub fn with_labels(examples: Vec<Example>, labels: LabelMap) -> Result<Self> {
        let classes = examples
            .iter()
            .map(|e| {
                labels
                    .index(&e.label)
                    .ok_or_else(|| Error::Data(format!("unknown label {:?}", e.label)))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            examples,
            labels,
            classes,
            encoded: None,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    /// Class index of every example.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.labels.len()];
        for &c in &self.classes {
            counts[c] += 1;
        }
        counts
    }

    pub fn tokenized(&self) -> Vec<Vec<String>> {
        self.examples.iter().map(|e| tokenize(&e.text)).collect()
    }

    pub fn encode(&mut self, vocab: &Vocabulary, max_len: usize) {
        self.encoded = Some(
            self.examples
                .iter()
                .map(|e| encode(&tokenize(&e.text), vocab, max_len))
                .collect(),
        );
    }

    pub fn encoded(&self) -> Option<&[Vec<usize>]> {
        self.encoded.as_deref()
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            labels: self.labels.clone(),
            classes: indices.iter().map(|&i| self.classes[i]).collect(),
            encoded: self
                .encoded
                .as_ref()
                .map(|enc| indices.iter().map(|&i| enc[i].clone()).collect()),
        }
    }
}

/// Parses JSON Lines of `{"text", "label"[, "signal_positions"]}`.
/// Blank lines are skipped; anything else malformed reports its line number.
pub fn parse_jsonl(reader: impl BufRead) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| FormatError::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    parse_jsonl(BufReader::new(File::open(path)?))
}

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut f, ex).map_err(std::io::Error::from)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

// ── Pretrained vectors ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LoadedEmbeddings {
    pub table: Tensor<f32>,
    /// Vocabulary tokens (excluding PAD/OOV) found in the file.
    pub coverage: usize,
}

/// Loads word2vec text vectors (`N d` header, then `token v1 … vd` lines)
/// into a `[V×d]` table. Rows the file does not cover are drawn from
/// U[−0.1, 0.1]; the PAD row is always zero.
pub fn load_embeddings(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<LoadedEmbeddings> {
    parse_embeddings(BufReader::new(File::open(path)?), vocab, dim, seed)
}

pub fn parse_embeddings(
    reader: impl BufRead,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<LoadedEmbeddings> {
    let bad = |line: usize, message: String| Error::Format(FormatError::Line { line, message });
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| bad(1, "missing header".into()))??;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (count, file_dim) = match fields.as_slice() {
        [n, d] => (
            n.parse::<usize>().map_err(|e| bad(1, format!("count: {e}")))?,
            d.parse::<usize>().map_err(|e| bad(1, format!("dimension: {e}")))?,
        ),
        _ => return Err(bad(1, "header must be \"N d\"".into())),
    };
    if file_dim != dim {
        return Err(FormatError::DimensionMismatch {
            expected: dim,
            found: file_dim,
        }
        .into());
    }

    let mut found: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        let mut parts = line.split_whitespace();
        let token = parts.next().expect("non-blank line has a token");
        let values = parts
            .map(|v| v.parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(lineno, format!("bad value: {e}")))?;
        if values.len() != dim {
            return Err(bad(
                lineno,
                format!("expected {dim} values, found {}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad(lineno, "non-finite value".into()));
        }
        if let Some(id) = vocab.lookup(token) {
            found.entry(id).or_insert(values);
        }
    }
    if rows != count {
        return Err(bad(rows + 1, format!("header declares {count} vectors, found {rows}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0f32; vocab.len() * dim];
    for id in 1..vocab.len() {
        let row = &mut data[id * dim..(id + 1) * dim];
        // Draw for every row so coverage does not shift other rows' values.
        for v in row.iter_mut() {
            *v = rng.gen_range(-0.1f64..0.1) as f32;
        }
        if let Some(vec) = found.get(&id) {
            row.copy_from_slice(vec);
        }
    }
    Ok(LoadedEmbeddings {
        table: Tensor::new(vec![vocab.len(), dim], data)?,
        coverage: found.len(),
    })
}

// ── Splitting ──────────────────────────────────────────────────────────

/// Per-class seeded shuffle, partitioned by `ratios` with largest-remainder
/// rounding. Each output keeps the input's relative order.
pub fn stratified_split(
    dataset: &Dataset,
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    if ratios.iter().any(|&r| r <= 0.0 || !r.is_finite()) {
        return Err(Error::config("split", "ratios must be positive"));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("split", "ratios must sum to 1"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.labels().len()];
    for (i, &c) in dataset.classes().iter().enumerate() {
        by_class[c].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 3 {
            return Err(Error::Data(format!(
                "class {:?} has {} examples; at least 3 required to split",
                dataset.labels().name(class).unwrap_or("?"),
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let sizes = largest_remainder(members.len(), &ratios);
        let mut start = 0;
        for (part, size) in parts.iter_mut().zip(sizes) {
            part.extend_from_slice(&members[start..start + size]);
            start += size;
        }
    }
    let [a, b, c] = parts.map(|mut p| {
        p.sort_unstable();
        dataset.subset(&p)
    });
    Ok((a, b, c))
}

/// Integer apportionment of `n` by `ratios`; leftover units go to the
/// largest fractional parts, earlier parts winning ties.
fn largest_remainder(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let quotas = ratios.map(|r| r * n as f64);
    let mut sizes = quotas.map(|q| q.floor() as usize);
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}
