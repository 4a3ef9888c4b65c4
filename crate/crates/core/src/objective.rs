//! MLM cross-entropy, [CLS] alignment losses, and the combined objective.
//!
//! Alignment losses return their value together with the gradients w.r.t.
//! both embedding matrices so the trainer can seed each pass's tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp, norm, softmax, Tensor};
use crate::tokenize::MlmTarget;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
const NORM_FLOOR: f64 = 1e-12;

/// Predicted pass-A embeddings against pass-B embeddings, one row per pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentBatch {
    pub z_a: Tensor,
    pub z_b: Tensor,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWithGrad {
    pub value: f64,
    pub grad_a: Tensor,
    pub grad_b: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentLoss {
    InfoNce,
    Mse,
    Cosine,
}

impl AlignmentLoss {
    pub fn evaluate(self, batch: &AlignmentBatch) -> Result<LossWithGrad> {
        match self {
            AlignmentLoss::InfoNce => info_nce_with_grad(batch),
            AlignmentLoss::Mse => mse_alignment_with_grad(&batch.z_a, &batch.z_b),
            AlignmentLoss::Cosine => cosine_alignment_with_grad(&batch.z_a, &batch.z_b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub mlm: f64,
    pub alignment: f64,
    pub total: f64,
    pub lambda: f64,
}

/// `total = mlm + lambda · alignment`.
pub fn combined_loss(mlm: f64, alignment: f64, lambda: f64) -> StepLosses {
    StepLosses {
        mlm,
        alignment,
        total: mlm + lambda * alignment,
        lambda,
    }
}

/// Mean cross-entropy over the labeled positions. `logits` rows are sequence positions.
pub fn mlm_loss(logits: &Tensor, target: &MlmTarget) -> Result<f64> {
    if target.label_positions.is_empty() {
        return Err(Error::DegenerateBatch("no MLM label positions".into()));
    }
    let total: f64 = target
        .label_positions
        .iter()
        .zip(&target.labels)
        .map(|(&pos, &label)| {
            let row = logits.row(pos);
            log_sum_exp(row) - row[label]
        })
        .sum();
    Ok(total / target.label_positions.len() as f64)
}

fn check_pair_shapes(z_a: &Tensor, z_b: &Tensor) -> Result<()> {
    if z_a.shape() != z_b.shape() {
        return Err(Error::InvalidArgument(format!(
            "embedding shapes differ: {:?} vs {:?}",
            z_a.shape(),
            z_b.shape()
        )));
    }
    if z_a.rows() == 0 {
        return Err(Error::InvalidArgument("empty embedding batch".into()));
    }
    Ok(())
}

/// Unit rows and the original norms; zero-norm rows are an error.
fn normalize_rows(z: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let mut unit = z.clone();
    let mut norms = Vec::with_capacity(z.rows());
    for r in 0..z.rows() {
        let n = norm(z.row(r));
        if n.is_nan() || n < NORM_FLOOR {
            return Err(Error::Numerical(format!(
                "row {r} has (near-)zero norm {n:e}"
            )));
        }
        for v in unit.row_mut(r) {
            *v /= n;
        }
        norms.push(n);
    }
    Ok((unit, norms))
}

/// Pulls a gradient w.r.t. unit rows back through the row normalization.
fn unnormalize_grad(unit: &Tensor, norms: &[f64], grad_unit: &Tensor) -> Tensor {
    let mut out = grad_unit.clone();
    for (r, &n) in norms.iter().enumerate() {
        let u = unit.row(r);
        let along = dot(u, grad_unit.row(r));
        for (o, uv) in out.row_mut(r).iter_mut().zip(u) {
            *o = (*o - uv * along) / n;
        }
    }
    out
}

pub fn info_nce(batch: &AlignmentBatch) -> Result<f64> {
    info_nce_with_grad(batch).map(|l| l.value)
}

/// Symmetric in-batch InfoNCE over cosine similarities scaled by `1/τ`.
pub fn info_nce_with_grad(batch: &AlignmentBatch) -> Result<LossWithGrad> {
    let (z_a, z_b, tau) = (&batch.z_a, &batch.z_b, batch.temperature);
    check_pair_shapes(z_a, z_b)?;
    let b = z_a.rows();
    if b < 2 {
        return Err(Error::InvalidArgument(
            "InfoNCE needs at least 2 pairs for in-batch negatives".into(),
        ));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature {tau} must be positive"
        )));
    }
    let (u, nu) = normalize_rows(z_a)?;
    let (w, nw) = normalize_rows(z_b)?;
    let s = u.matmul_bt(&w).scaled(1.0 / tau);

    let mut value = 0.0;
    // d loss / d s
    let mut g = Tensor::zeros(&[b, b]);
    let half_mean = 0.5 / b as f64;
    for i in 0..b {
        let row = s.row(i);
        value += log_sum_exp(row) - row[i];
        for (j, p) in softmax(row).into_iter().enumerate() {
            g.row_mut(i)[j] += half_mean * (p - f64::from(u8::from(i == j)));
        }
    }
    let st = s.transpose();
    for j in 0..b {
        let col = st.row(j);
        value += log_sum_exp(col) - col[j];
        for (i, p) in softmax(col).into_iter().enumerate() {
            g.row_mut(i)[j] += half_mean * (p - f64::from(u8::from(i == j)));
        }
    }
    value *= half_mean;

    let g = g.scaled(1.0 / tau);
    let grad_u = g.matmul(&w);
    let grad_w = g.matmul_at(&u);
    Ok(LossWithGrad {
        value,
        grad_a: unnormalize_grad(&u, &nu, &grad_u),
        grad_b: unnormalize_grad(&w, &nw, &grad_w),
    })
}

pub fn mse_alignment(z_a: &Tensor, z_b: &Tensor) -> Result<f64> {
    mse_alignment_with_grad(z_a, z_b).map(|l| l.value)
}

/// Mean over all entries of `(z_a − z_b)²`.
pub fn mse_alignment_with_grad(z_a: &Tensor, z_b: &Tensor) -> Result<LossWithGrad> {
    check_pair_shapes(z_a, z_b)?;
    let n = z_a.len() as f64;
    let mut diff = z_a.clone();
    diff.scale_add_assign(-1.0, z_b);
    let value = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    let grad_a = diff.scaled(2.0 / n);
    let grad_b = diff.scaled(-2.0 / n);
    Ok(LossWithGrad {
        value,
        grad_a,
        grad_b,
    })
}

pub fn cosine_alignment(z_a: &Tensor, z_b: &Tensor) -> Result<f64> {
    cosine_alignment_with_grad(z_a, z_b).map(|l| l.value)
}

/// `mean_i (1 − cos(z_a[i], z_b[i]))`, in `[0, 2]`.
pub fn cosine_alignment_with_grad(z_a: &Tensor, z_b: &Tensor) -> Result<LossWithGrad> {
    check_pair_shapes(z_a, z_b)?;
    let b = z_a.rows();
    let (u, nu) = normalize_rows(z_a)?;
    let (w, nw) = normalize_rows(z_b)?;
    let value = (0..b).map(|i| 1.0 - dot(u.row(i), w.row(i))).sum::<f64>() / b as f64;
    let grad_u = w.scaled(-1.0 / b as f64);
    let grad_w = u.scaled(-1.0 / b as f64);
    Ok(LossWithGrad {
        value,
        grad_a: unnormalize_grad(&u, &nu, &grad_u),
        grad_b: unnormalize_grad(&w, &nw, &grad_w),
    })
}
