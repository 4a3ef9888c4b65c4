//! Synthetic cipher-language corpora, TSV ingestion, and batch sampling.
//!
//! A cipher language renames every base token to `<langid>_<token>` and
//! optionally reverses word order, so two renderings of one base sentence
//! are translation-equivalent by construction.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordOrder {
    Identity,
    Reversed,
}

impl WordOrder {
    pub fn flipped(self) -> Self {
        match self {
            WordOrder::Identity => WordOrder::Reversed,
            WordOrder::Reversed => WordOrder::Identity,
        }
    }

    fn apply<T>(self, tokens: &mut [T]) {
        if self == WordOrder::Reversed {
            tokens.reverse();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub language_id: String,
    /// Base vocabulary, index-aligned with `surface`.
    pub base: Vec<String>,
    pub surface: Vec<String>,
    pub order: WordOrder,
}

impl LanguageSpec {
    fn surface_of(&self, base_index: usize) -> &str {
        &self.surface[base_index]
    }

    /// Renders a sentence given as base-vocabulary indices.
    pub fn render(&self, base_sentence: &[usize]) -> String {
        self.render_with(base_sentence, self.order)
    }

    fn render_with(&self, base_sentence: &[usize], order: WordOrder) -> String {
        let mut words: Vec<&str> = base_sentence.iter().map(|&i| self.surface_of(i)).collect();
        order.apply(&mut words);
        words.join(" ")
    }

    /// Inverts the token map and word order; `None` if a word is foreign.
    pub fn decode(&self, text: &str) -> Option<Vec<String>> {
        self.decode_with(text, self.order)
    }

    pub fn decode_with(&self, text: &str, order: WordOrder) -> Option<Vec<String>> {
        let prefix = format!("{}_", self.language_id);
        let mut words: Vec<String> = text
            .split_whitespace()
            .map(|w| w.strip_prefix(&prefix).map(str::to_string))
            .collect::<Option<_>>()?;
        order.apply(&mut words);
        Some(words)
    }
}

/// Builds the cipher language for `seed`. Its id is `l<seed>`.
pub fn generate_language(
    seed: u64,
    base_vocab: &[String],
    use_permutation: bool,
) -> Result<LanguageSpec> {
    if base_vocab.is_empty() {
        return Err(Error::InvalidArgument("base vocabulary is empty".into()));
    }
    let mut seen = HashSet::new();
    for t in base_vocab {
        if t.is_empty() || t.chars().any(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!(
                "base token {t:?} is empty or contains whitespace"
            )));
        }
        if !seen.insert(t.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "duplicate base token {t:?}"
            )));
        }
    }
    let language_id = format!("l{seed}");
    let surface: Vec<String> = base_vocab
        .iter()
        .map(|t| format!("{language_id}_{t}"))
        .collect();
    if let Some(clash) = surface.iter().find(|s| seen.contains(s.as_str())) {
        return Err(Error::InvalidArgument(format!(
            "surface token {clash:?} collides with the base vocabulary"
        )));
    }
    Ok(LanguageSpec {
        language_id,
        base: base_vocab.to_vec(),
        surface,
        order: if use_permutation {
            WordOrder::Reversed
        } else {
            WordOrder::Identity
        },
    })
}

/// `count` languages over `w0 .. w{base_vocab_size-1}`: language `k` has
/// seed `k` and reversed word order when `k` is odd.
pub fn synthetic_languages(count: usize, base_vocab_size: usize) -> Result<Vec<LanguageSpec>> {
    let base = default_base_vocab(base_vocab_size);
    (0..count as u64)
        .map(|k| generate_language(k, &base, k % 2 == 1))
        .collect()
}

/// `w0 .. w{n-1}`.
pub fn default_base_vocab(size: usize) -> Vec<String> {
    (0..size).map(|i| format!("w{i}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub text_a: String,
    pub lang_a: String,
    pub text_b: String,
    pub lang_b: String,
    pub related: bool,
}

impl ParallelPair {
    pub fn is_monolingual(&self) -> bool {
        self.lang_a == self.lang_b
    }
}

fn check_generation_args(languages: &[LanguageSpec], length_range: (usize, usize)) -> Result<()> {
    let (min, max) = length_range;
    if min == 0 || min > max {
        return Err(Error::InvalidArgument(format!(
            "length range ({min}, {max}) must satisfy 1 <= min <= max"
        )));
    }
    if let Some(l) = languages.iter().find(|l| l.base != languages[0].base) {
        return Err(Error::InvalidArgument(format!(
            "language {} uses a different base vocabulary",
            l.language_id
        )));
    }
    Ok(())
}

fn base_sentence(rng: &mut ChaCha8Rng, vocab_len: usize, (min, max): (usize, usize)) -> Vec<usize> {
    let len = rng.random_range(min..=max);
    (0..len).map(|_| rng.random_range(0..vocab_len)).collect()
}

/// Translation pairs between two distinct languages, drawn uniformly over
/// ordered language pairs.
pub fn generate_parallel_corpus(
    languages: &[LanguageSpec],
    n_pairs: usize,
    length_range: (usize, usize),
    seed: u64,
) -> Result<Vec<ParallelPair>> {
    if languages.len() < 2 {
        return Err(Error::InvalidArgument(
            "a parallel corpus needs at least two languages".into(),
        ));
    }
    check_generation_args(languages, length_range)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab_len = languages[0].base.len();
    let n = languages.len();
    Ok((0..n_pairs)
        .map(|_| {
            let base = base_sentence(&mut rng, vocab_len, length_range);
            let a = rng.random_range(0..n);
            let b = (a + rng.random_range(1..n)) % n;
            let (la, lb) = (&languages[a], &languages[b]);
            ParallelPair {
                text_a: la.render(&base),
                lang_a: la.language_id.clone(),
                text_b: lb.render(&base),
                lang_b: lb.language_id.clone(),
                related: true,
            }
        })
        .collect())
}

/// Same-language paraphrase pairs: one meaning rendered in one language
/// under both word orders.
pub fn generate_paraphrase_corpus(
    languages: &[LanguageSpec],
    n_pairs: usize,
    length_range: (usize, usize),
    seed: u64,
) -> Result<Vec<ParallelPair>> {
    if languages.is_empty() {
        return Err(Error::InvalidArgument("no languages given".into()));
    }
    check_generation_args(languages, length_range)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab_len = languages[0].base.len();
    Ok((0..n_pairs)
        .map(|_| {
            let base = base_sentence(&mut rng, vocab_len, length_range);
            let lang = &languages[rng.random_range(0..languages.len())];
            ParallelPair {
                text_a: lang.render(&base),
                lang_a: lang.language_id.clone(),
                text_b: lang.render_with(&base, lang.order.flipped()),
                lang_b: lang.language_id.clone(),
                related: true,
            }
        })
        .collect())
}

/// Reads `text_a TAB text_b TAB lang_a TAB lang_b` lines. Blank lines are skipped.
pub fn load_parallel_tsv(path: &Path) -> Result<Vec<ParallelPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_parallel_tsv(&text)
}

pub fn parse_parallel_tsv(text: &str) -> Result<Vec<ParallelPair>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        if fields[2].is_empty() || fields[3].is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "empty language tag".into(),
            });
        }
        pairs.push(ParallelPair {
            text_a: fields[0].to_string(),
            text_b: fields[1].to_string(),
            lang_a: fields[2].to_string(),
            lang_b: fields[3].to_string(),
            related: true,
        });
    }
    Ok(pairs)
}

pub fn write_parallel_tsv(pairs: &[ParallelPair], mut out: impl Write) -> std::io::Result<()> {
    for p in pairs {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            p.text_a, p.text_b, p.lang_a, p.lang_b
        )?;
    }
    Ok(())
}

pub fn save_parallel_tsv(pairs: &[ParallelPair], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_parallel_tsv(pairs, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PackingMode {
    Monolingual,
    Bilingual,
}

impl fmt::Display for PackingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PackingMode::Monolingual => "monolingual",
            PackingMode::Bilingual => "bilingual",
        })
    }
}

impl FromStr for PackingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "monolingual" => Ok(PackingMode::Monolingual),
            "bilingual" => Ok(PackingMode::Bilingual),
            other => Err(Error::InvalidArgument(format!(
                "unknown packing mode {other:?}"
            ))),
        }
    }
}

/// Indices of the related pairs usable as positives under `mode`.
///
/// Bilingual packing accepts every related pair; monolingual packing only
/// same-language ones.
pub fn eligible_indices(pairs: &[ParallelPair], mode: PackingMode) -> Vec<usize> {
    pairs
        .iter()
        .enumerate()
        .filter(|(_, p)| p.related && (mode == PackingMode::Bilingual || p.is_monolingual()))
        .map(|(i, _)| i)
        .collect()
}

/// Draws `batch_size` distinct eligible pairs.
pub fn sample_training_batch<R: Rng + ?Sized>(
    pairs: &[ParallelPair],
    mode: PackingMode,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<ParallelPair>> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument(
            "batch_size must be at least 2 for in-batch negatives".into(),
        ));
    }
    let eligible = eligible_indices(pairs, mode);
    if eligible.is_empty() {
        return Err(Error::Config(format!(
            "no related pairs usable in {mode} mode"
        )));
    }
    if eligible.len() < batch_size {
        return Err(Error::Config(format!(
            "{} eligible pairs cannot fill a batch of {batch_size}",
            eligible.len()
        )));
    }
    Ok(sample(rng, eligible.len(), batch_size)
        .into_iter()
        .map(|k| pairs[eligible[k]].clone())
        .collect())
}
