//! Deterministic labelled corpora with planted class keywords.
//!
//! Each document is a run of background words drawn uniformly from a fixed
//! pseudo-word vocabulary, with a few of its class's keywords inserted at
//! random positions and, occasionally, one keyword belonging to another
//! class. The offsets of the planted own-class keywords are recorded as
//! `signal_positions`.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{Dataset, Example};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub docs_per_class: usize,
    /// Inclusive document length range in tokens.
    pub doc_len: (usize, usize),
    pub keywords_per_class: usize,
    /// Probability a document receives its class keywords at all.
    pub signal_prob: f64,
    /// Inclusive range for the number of own-class keyword insertions.
    pub keyword_occurrences: (usize, usize),
    pub background_vocab: usize,
    /// Probability a document also contains one keyword of another class.
    pub noise_overlap: f64,
    /// Explicit keyword sets, one per class; generated when absent.
    pub keywords: Option<Vec<Vec<String>>>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            docs_per_class: 500,
            doc_len: (30, 120),
            keywords_per_class: 3,
            signal_prob: 1.0,
            keyword_occurrences: (1, 3),
            background_vocab: 500,
            noise_overlap: 0.1,
            keywords: None,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub examples: Vec<Example>,
    /// Keyword set of each class, indexed like the class names.
    pub keywords: Vec<Vec<String>>,
}

impl SynthCorpus {
    pub fn dataset(&self) -> Dataset {
        Dataset::new(self.examples.clone())
    }

    /// The corpus as JSON Lines.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(ex).expect("examples serialize"));
            out.push('\n');
        }
        out
    }
}

pub fn class_name(class: usize) -> String {
    format!("class_{class}")
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Pseudo-word built from `syllables` consonant-vowel syllables encoding `n`.
fn pseudo_word(mut n: usize, syllables: usize) -> String {
    let base = ONSETS.len() * VOWELS.len();
    let mut w = String::new();
    for _ in 0..syllables {
        let s = n % base;
        n /= base;
        w.push_str(ONSETS[s / VOWELS.len()]);
        w.push_str(VOWELS[s % VOWELS.len()]);
    }
    w
}

/// Background words use three syllables and keywords four, so the two
/// sets never collide. Spellings are bijective in the index, so each set
/// is duplicate-free.
fn background_word(i: usize) -> String {
    pseudo_word(i, 3)
}

fn keyword(class: usize, j: usize, per_class: usize) -> String {
    // Spread indices so neighbouring classes do not share prefixes.
    pseudo_word((class * per_class + j) * 7919 + 101, 4)
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least 2 classes to classify"));
        }
        let (lo, hi) = self.doc_len;
        if lo < 5 || hi < lo {
            return Err(Error::config("doc_len", "need 5 <= lo <= hi"));
        }
        let (klo, khi) = self.keyword_occurrences;
        if klo < 1 || khi < klo || khi >= lo {
            return Err(Error::config(
                "keyword_occurrences",
                "need 1 <= lo <= hi < minimum document length",
            ));
        }
        if self.keywords_per_class < 1 && self.keywords.is_none() {
            return Err(Error::config("keywords_per_class", "must be >= 1"));
        }
        let cap = (ONSETS.len() * VOWELS.len()).pow(3);
        if self.background_vocab < 1 || self.background_vocab > cap {
            return Err(Error::config(
                "background_vocab",
                format!("must be in 1..={cap}"),
            ));
        }
        for (field, p) in [("signal_prob", self.signal_prob), ("noise_overlap", self.noise_overlap)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, "probability must be in [0, 1]"));
            }
        }
        Ok(())
    }

    fn keyword_sets(&self) -> Result<Vec<Vec<String>>> {
        let sets = match &self.keywords {
            Some(sets) => {
                if sets.len() != self.classes {
                    return Err(Error::config(
                        "keywords",
                        format!("{} keyword sets for {} classes", sets.len(), self.classes),
                    ));
                }
                sets.clone()
            }
            None => (0..self.classes)
                .map(|c| {
                    (0..self.keywords_per_class)
                        .map(|j| keyword(c, j, self.keywords_per_class))
                        .collect()
                })
                .collect(),
        };
        let background: HashSet<String> = (0..self.background_vocab).map(background_word).collect();
        let mut seen = HashSet::new();
        for (c, set) in sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::config("keywords", format!("class {c} has no keywords")));
            }
            for k in set {
                if k.is_empty() || !k.chars().all(|ch| ch.is_alphanumeric() && !ch.is_uppercase()) {
                    return Err(Error::config(
                        "keywords",
                        format!("keyword {k:?} must be a lowercase alphanumeric token"),
                    ));
                }
                if background.contains(k) {
                    return Err(Error::config(
                        "keywords",
                        format!("keyword {k:?} is also a background word"),
                    ));
                }
                if !seen.insert(k.clone()) {
                    return Err(Error::config(
                        "keywords",
                        format!("keyword {k:?} appears in more than one set"),
                    ));
                }
            }
        }
        Ok(sets)
    }
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let keywords = cfg.keyword_sets()?;
    let background: Vec<String> = (0..cfg.background_vocab).map(background_word).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut examples = Vec::with_capacity(cfg.classes * cfg.docs_per_class);

    for _ in 0..cfg.docs_per_class {
        for class in 0..cfg.classes {
            let len = rng.gen_range(cfg.doc_len.0..=cfg.doc_len.1);
            let mut planted: Vec<(String, bool)> = Vec::new();
            if rng.gen_bool(cfg.signal_prob) {
                let n = rng.gen_range(cfg.keyword_occurrences.0..=cfg.keyword_occurrences.1);
                for _ in 0..n {
                    let k = keywords[class].choose(&mut rng).expect("non-empty set");
                    planted.push((k.clone(), true));
                }
            }
            if cfg.classes > 1 && rng.gen_bool(cfg.noise_overlap) {
                let mut other = rng.gen_range(0..cfg.classes - 1);
                if other >= class {
                    other += 1;
                }
                let k = keywords[other].choose(&mut rng).expect("non-empty set");
                planted.push((k.clone(), false));
            }
            let mut tokens: Vec<(String, bool)> = (0..len - planted.len())
                .map(|_| (background.choose(&mut rng).expect("non-empty").clone(), false))
                .collect();
            for item in planted {
                let at = rng.gen_range(0..=tokens.len());
                tokens.insert(at, item);
            }
            let signal_positions = tokens
                .iter()
                .enumerate()
                .filter(|(_, (_, s))| *s)
                .map(|(i, _)| i)
                .collect();
            let text = tokens
                .iter()
                .map(|(t, _)| t.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            examples.push(Example {
                text,
                label: class_name(class),
                signal_positions: Some(signal_positions),
            });
        }
    }
    Ok(SynthCorpus { examples, keywords })
}
