//! Collapse diagnostics over occluded-pass [CLS] embeddings: three-category
//! cosine tables, PCA variance spectrum, RankMe effective rank,
//! positive/negative cosine curves and embedding export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ParallelPair;
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::numerics::{cosine, norm, Tensor};
use crate::trainer::MetricsLog;

/// Mismatched partners drawn per related pair and per unrelated category.
pub const DEFAULT_UNRELATED_SAMPLES: usize = 5;
pub const DEFAULT_RANKME_EPS: f64 = 1e-12;

/// Mean cosine of one table cell; `mean` is `None` when `count` is 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: Option<f64>,
    pub count: usize,
}

impl Cell {
    fn from_values(values: &[f64]) -> Cell {
        if values.is_empty() {
            return Cell::default();
        }
        Cell {
            mean: Some(values.iter().sum::<f64>() / values.len() as f64),
            count: values.len(),
        }
    }

    /// Sample-weighted pooling of several cells.
    pub fn pooled<'a>(cells: impl IntoIterator<Item = &'a Cell>) -> Cell {
        let (mut sum, mut count) = (0.0, 0);
        for c in cells {
            if let Some(m) = c.mean {
                sum += m * c.count as f64;
                count += c.count;
            }
        }
        if count == 0 {
            Cell::default()
        } else {
            Cell {
                mean: Some(sum / count as f64),
                count,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineRow {
    /// Unordered language pair, stored sorted.
    pub languages: (String, String),
    pub same_language_unrelated: Cell,
    pub diff_language_related: Cell,
    pub diff_language_unrelated: Cell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineCategoryTable {
    pub rows: Vec<CosineRow>,
}

impl CosineCategoryTable {
    /// All rows pooled, weighted by sample count.
    pub fn overall(&self) -> CosineRow {
        CosineRow {
            languages: ("all".into(), "all".into()),
            same_language_unrelated: Cell::pooled(
                self.rows.iter().map(|r| &r.same_language_unrelated),
            ),
            diff_language_related: Cell::pooled(self.rows.iter().map(|r| &r.diff_language_related)),
            diff_language_unrelated: Cell::pooled(
                self.rows.iter().map(|r| &r.diff_language_unrelated),
            ),
        }
    }

    /// Both unrelated categories pooled over all rows.
    pub fn unrelated(&self) -> Cell {
        let o = self.overall();
        Cell::pooled([&o.same_language_unrelated, &o.diff_language_unrelated])
    }

    pub fn to_tsv(&self) -> String {
        fn fmt(c: &Cell) -> String {
            c.mean
                .map_or_else(|| "NA".to_string(), |m| format!("{m:.6}"))
        }
        let mut out = String::from(
            "language_pair\tsame_lang_unrelated\tdiff_lang_related\tdiff_lang_unrelated\tcounts\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}-{}\t{}\t{}\t{}\t{},{},{}",
                r.languages.0,
                r.languages.1,
                fmt(&r.same_language_unrelated),
                fmt(&r.diff_language_related),
                fmt(&r.diff_language_unrelated),
                r.same_language_unrelated.count,
                r.diff_language_related.count,
                r.diff_language_unrelated.count,
            );
        }
        out
    }
}

/// Cosine table from precomputed embeddings: row `i` of `z_a`/`z_b` embeds
/// `pairs[i].text_a`/`text_b`.
///
/// Only related cross-language pairs contribute. For each such pair, `k`
/// partners `j ≠ i` from the same language-pair group are drawn per unrelated
/// category; the same-language draws alternate between the group's two
/// languages. Groups with fewer than two pairs report empty cells.
pub fn cosine_category_table<R: Rng + ?Sized>(
    pairs: &[ParallelPair],
    z_a: &Tensor,
    z_b: &Tensor,
    k: usize,
    rng: &mut R,
) -> Result<CosineCategoryTable> {
    if z_a.rows() != pairs.len() || z_b.rows() != pairs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} pairs but {}/{} embedding rows",
            pairs.len(),
            z_a.rows(),
            z_b.rows()
        )));
    }
    let mut groups: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        if p.related && p.lang_a != p.lang_b {
            let key = if p.lang_a < p.lang_b {
                (p.lang_a.clone(), p.lang_b.clone())
            } else {
                (p.lang_b.clone(), p.lang_a.clone())
            };
            groups.entry(key).or_default().push(i);
        }
    }
    // Sentence of pair `i` in language `lang`.
    let side = |i: usize, lang: &str| -> &[f64] {
        if pairs[i].lang_a == lang {
            z_a.row(i)
        } else {
            z_b.row(i)
        }
    };
    let mut rows = Vec::with_capacity(groups.len());
    for (key, members) in groups {
        let (mut same, mut related, mut diff) = (Vec::new(), Vec::new(), Vec::new());
        if members.len() >= 2 {
            let langs = [key.0.as_str(), key.1.as_str()];
            for (pos, &i) in members.iter().enumerate() {
                related.push(cosine(z_a.row(i), z_b.row(i))?);
                let mut partner = || {
                    let r = rng.random_range(0..members.len() - 1);
                    members[if r >= pos { r + 1 } else { r }]
                };
                for s in 0..k {
                    let j = partner();
                    let lang = langs[s % 2];
                    same.push(cosine(side(i, lang), side(j, lang))?);
                }
                for s in 0..k {
                    let j = partner();
                    let lang = langs[s % 2];
                    let other = langs[1 - s % 2];
                    diff.push(cosine(side(i, lang), side(j, other))?);
                }
            }
        }
        rows.push(CosineRow {
            languages: key,
            same_language_unrelated: Cell::from_values(&same),
            diff_language_related: Cell::from_values(&related),
            diff_language_unrelated: Cell::from_values(&diff),
        });
    }
    Ok(CosineCategoryTable { rows })
}

/// Embeds `pairs` with the occluded passes and tabulates their cosines.
pub fn cosine_category_report<R: Rng + ?Sized>(
    model: &Model,
    pairs: &[ParallelPair],
    unrelated_samples_per_pair: usize,
    rng: &mut R,
) -> Result<CosineCategoryTable> {
    let (z_a, z_b) = model.embed_pairs(pairs)?;
    cosine_category_table(pairs, &z_a, &z_b, unrelated_samples_per_pair, rng)
}

/// Rows of `a` followed by rows of `b`.
pub fn stack_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::InvalidArgument(format!(
            "cannot stack {} and {} columns",
            a.cols(),
            b.cols()
        )));
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[a.rows() + b.rows(), a.cols()], data)
}

fn to_matrix(x: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(x.rows(), x.cols(), x.data())
}

/// Explained-variance ratios of the mean-centred rows, descending.
pub fn pca_spectrum(embeddings: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = (embeddings.rows(), embeddings.cols());
    if n < 2 {
        return Err(Error::InvalidArgument("PCA needs at least 2 rows".into()));
    }
    let mut x = to_matrix(embeddings);
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let mut eig: Vec<f64> = cov
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|&v| v.max(0.0))
        .collect();
    let total: f64 = eig.iter().sum();
    if total <= 1e-12 {
        return Err(Error::DegenerateInput(format!(
            "total variance {total:e} across {n} rows of width {d}"
        )));
    }
    eig.sort_by(|a, b| b.total_cmp(a));
    Ok(eig.into_iter().map(|v| v / total).collect())
}

/// `exp(−Σ p_k ln p_k)` with `p_k = σ_k/Σσ + eps` over the singular values
/// of the uncentred matrix.
pub fn rankme(embeddings: &Tensor, eps: f64) -> Result<f64> {
    if embeddings.rows() == 0 || embeddings.cols() == 0 {
        return Err(Error::InvalidArgument("empty embedding matrix".into()));
    }
    let sv = to_matrix(embeddings).singular_values();
    let total: f64 = sv.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::DegenerateInput("all-zero embedding matrix".into()));
    }
    let entropy: f64 = sv
        .iter()
        .map(|&s| {
            let p = s / total + eps;
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum();
    Ok(entropy.exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub variance_ratios: Vec<f64>,
    pub first_component_share: f64,
    pub rankme: f64,
}

pub fn spectrum_report(embeddings: &Tensor, eps: f64) -> Result<SpectrumReport> {
    let variance_ratios = pca_spectrum(embeddings)?;
    Ok(SpectrumReport {
        first_component_share: variance_ratios[0],
        rankme: rankme(embeddings, eps)?,
        variance_ratios,
    })
}

fn unit_rows(z: &Tensor) -> Result<Vec<Vec<f64>>> {
    (0..z.rows())
        .map(|i| {
            let r = z.row(i);
            let n = norm(r);
            if n < 1e-12 {
                return Err(Error::DegenerateInput(format!("row {i} has zero norm")));
            }
            Ok(r.iter().map(|v| v / n).collect())
        })
        .collect()
}

/// Mean `cos(z_a[i], z_b[i])` and mean `cos(z_a[i], z_b[j])` over `i ≠ j`.
pub fn mean_positive_negative_cosine(z_a: &Tensor, z_b: &Tensor) -> Result<(f64, f64)> {
    let n = z_a.rows();
    if n < 2 || z_b.rows() != n || z_a.cols() != z_b.cols() {
        return Err(Error::InvalidArgument(format!(
            "need two matching matrices with at least 2 rows, got {:?} and {:?}",
            z_a.shape(),
            z_b.shape()
        )));
    }
    let (ua, ub) = (unit_rows(z_a)?, unit_rows(z_b)?);
    let (mut pos, mut neg) = (0.0, 0.0);
    for (i, a) in ua.iter().enumerate() {
        for (j, b) in ub.iter().enumerate() {
            let c = crate::numerics::dot(a, b);
            if i == j {
                pos += c;
            } else {
                neg += c;
            }
        }
    }
    Ok((pos / n as f64, neg / (n * (n - 1)) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosNegCurves {
    pub epochs: Vec<usize>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

pub fn pos_neg_curves(metrics: &MetricsLog) -> PosNegCurves {
    PosNegCurves {
        epochs: metrics.records.iter().map(|r| r.epoch).collect(),
        positive: metrics
            .records
            .iter()
            .map(|r| r.mean_positive_cosine)
            .collect(),
        negative: metrics
            .records
            .iter()
            .map(|r| r.mean_negative_cosine)
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub pair_index: usize,
    pub side: String,
    pub language: String,
    pub vector: Vec<f64>,
}

/// One record per sentence, ordered by pair then side.
pub fn embedding_records(model: &Model, pairs: &[ParallelPair]) -> Result<Vec<EmbeddingRecord>> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to export".into()));
    }
    let (z_a, z_b) = model.embed_pairs(pairs)?;
    let mut out = Vec::with_capacity(2 * pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        out.push(EmbeddingRecord {
            pair_index: i,
            side: "a".into(),
            language: p.lang_a.clone(),
            vector: z_a.row(i).to_vec(),
        });
        out.push(EmbeddingRecord {
            pair_index: i,
            side: "b".into(),
            language: p.lang_b.clone(),
            vector: z_b.row(i).to_vec(),
        });
    }
    Ok(out)
}

/// Writes [`embedding_records`] as JSONL.
pub fn export_embeddings(model: &Model, pairs: &[ParallelPair], path: &Path) -> Result<()> {
    let records = embedding_records(model, pairs)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
