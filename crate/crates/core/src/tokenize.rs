//! Vocabulary, dual-[CLS] packing, MLM corruption and alignment masks.
//!
//! Packed layout for segments `a` and `b`:
//!
//! ```text
//! [CLS] a1 .. an [SEP] [CLS] b1 .. bm [SEP] [PAD] ..
//!   seg 0 ─────────────┘ └ seg 1 ───────────┘  seg 0
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::corpus::ParallelPair;
use crate::error::{Error, Result};

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const PAD: usize = 2;
pub const MASK: usize = 3;
pub const N_SPECIAL: usize = 4;
pub const SPECIAL_TOKENS: [&str; N_SPECIAL] = ["[CLS]", "[SEP]", "[PAD]", "[MASK]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials first, then every whitespace token of the corpus in lexicographic order.
    pub fn build(corpus: &[ParallelPair]) -> Self {
        let mut words: Vec<&str> = corpus
            .iter()
            .flat_map(|p| {
                p.text_a
                    .split_whitespace()
                    .chain(p.text_b.split_whitespace())
            })
            .filter(|w| !SPECIAL_TOKENS.contains(w))
            .collect();
        words.sort_unstable();
        words.dedup();
        let tokens = SPECIAL_TOKENS
            .iter()
            .copied()
            .chain(words)
            .map(str::to_string)
            .collect();
        Self::from_tokens(tokens).expect("distinct by construction")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::InvalidArgument(format!("token {w:?} not in vocabulary")))
            })
            .collect()
    }

    /// `token TAB id` per line, in id order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            out.push('\t');
            out.push_str(&i.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                line: i + 1,
                message,
            };
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| parse_err("expected token TAB id".into()))?;
            let id: usize = id
                .parse()
                .map_err(|_| parse_err(format!("bad id {id:?}")))?;
            if id != tokens.len() {
                return Err(parse_err(format!("id {id} out of sequence")));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < N_SPECIAL || tokens[..N_SPECIAL] != SPECIAL_TOKENS {
            return Err(Error::InvalidArgument(
                "vocabulary must start with [CLS] [SEP] [PAD] [MASK]".into(),
            ));
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedExample {
    pub ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub padding_mask: Vec<bool>,
    pub cls_a_pos: usize,
    pub cls_b_pos: usize,
    pub len_a: usize,
    pub len_b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Span {
    A,
    B,
    Pad,
}

impl PackedExample {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Index of the trailing [SEP].
    pub fn sep_b_pos(&self) -> usize {
        self.cls_b_pos + self.len_b + 1
    }

    pub fn span(&self, pos: usize) -> Span {
        if pos <= self.len_a + 1 {
            Span::A
        } else if pos <= self.sep_b_pos() {
            Span::B
        } else {
            Span::Pad
        }
    }

    pub fn segment_a(&self) -> &[usize] {
        &self.ids[1..=self.len_a]
    }

    pub fn segment_b(&self) -> &[usize] {
        &self.ids[self.cls_b_pos + 1..=self.cls_b_pos + self.len_b]
    }

    /// Positions holding ordinary segment tokens (MLM-eligible).
    pub fn content_positions(&self) -> impl Iterator<Item = usize> + '_ {
        (1..=self.len_a).chain(self.cls_b_pos + 1..=self.cls_b_pos + self.len_b)
    }
}

pub fn pack_pair(ids_a: &[usize], ids_b: &[usize], max_len: usize) -> Result<PackedExample> {
    let needed = ids_a.len() + ids_b.len() + 4;
    if needed > max_len {
        return Err(Error::Truncation { needed, max_len });
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend_from_slice(ids_a);
    ids.push(SEP);
    let cls_b_pos = ids.len();
    ids.push(CLS);
    ids.extend_from_slice(ids_b);
    ids.push(SEP);
    let real = ids.len();
    ids.resize(max_len, PAD);
    let segment_ids = (0..max_len)
        .map(|p| usize::from(p >= cls_b_pos && p < real))
        .collect();
    let padding_mask = (0..max_len).map(|p| p < real).collect();
    Ok(PackedExample {
        ids,
        segment_ids,
        padding_mask,
        cls_a_pos: 0,
        cls_b_pos,
        len_a: ids_a.len(),
        len_b: ids_b.len(),
    })
}

/// Encodes and packs a corpus pair.
pub fn pack_text_pair(vocab: &Vocab, pair: &ParallelPair, max_len: usize) -> Result<PackedExample> {
    pack_pair(
        &vocab.encode(&pair.text_a)?,
        &vocab.encode(&pair.text_b)?,
        max_len,
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmTarget {
    pub corrupted_ids: Vec<usize>,
    pub label_positions: Vec<usize>,
    pub labels: Vec<usize>,
}

/// BERT-style corruption: each content position is selected with
/// `mask_prob`; a selected token becomes [MASK] (80%), a random regular
/// token (10%) or stays unchanged (10%), and is labeled in every case.
pub fn apply_mlm_corruption<R: Rng + ?Sized>(
    example: &PackedExample,
    mask_prob: f64,
    vocab_size: usize,
    rng: &mut R,
) -> MlmTarget {
    assert!(
        (0.0..=1.0).contains(&mask_prob),
        "mask_prob must lie in [0, 1]"
    );
    let mut corrupted_ids = example.ids.clone();
    let mut label_positions = Vec::new();
    let mut labels = Vec::new();
    for pos in example.content_positions() {
        if !rng.random_bool(mask_prob) {
            continue;
        }
        label_positions.push(pos);
        labels.push(example.ids[pos]);
        let roll: f64 = rng.random();
        if roll < 0.8 {
            corrupted_ids[pos] = MASK;
        } else if roll < 0.9 && vocab_size > N_SPECIAL {
            corrupted_ids[pos] = rng.random_range(N_SPECIAL..vocab_size);
        }
    }
    MlmTarget {
        corrupted_ids,
        label_positions,
        labels,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentMasks {
    pub mask_a: Vec<bool>,
    pub mask_b: Vec<bool>,
}

/// Pass A sees only `[CLS] a.. [SEP]`; pass B only `[CLS] b.. [SEP]`.
pub fn build_alignment_masks(example: &PackedExample) -> AlignmentMasks {
    let n = example.max_len();
    AlignmentMasks {
        mask_a: (0..n).map(|p| example.span(p) == Span::A).collect(),
        mask_b: (0..n).map(|p| example.span(p) == Span::B).collect(),
    }
}
