use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − fd| / max(1, |analytic|, |fd|)` over all coordinates.
    pub max_relative_error: f64,
    /// `(tensor index, flat offset)` where the maximum occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Checks `f`'s analytic gradient at `point` with central finite differences.
///
/// `f` returns the scalar value and one gradient tensor per input tensor.
pub fn grad_check<F>(f: F, point: &[Tensor], fd_step: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    if fd_step.is_nan() || fd_step <= 0.0 {
        return Err(Error::InvalidArgument("fd_step must be positive".into()));
    }
    let (value, analytic) = f(point)?;
    if !value.is_finite() {
        return Err(Error::Numerical(
            "non-finite value at the check point".into(),
        ));
    }
    if analytic.len() != point.len() {
        return Err(Error::InvalidArgument(format!(
            "function returned {} gradients for {} inputs",
            analytic.len(),
            point.len()
        )));
    }
    let mut probe = point.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for t in 0..point.len() {
        for i in 0..point[t].len() {
            let x0 = point[t].data()[i];
            probe[t].data_mut()[i] = x0 + fd_step;
            let plus = f(&probe)?.0;
            probe[t].data_mut()[i] = x0 - fd_step;
            let minus = f(&probe)?.0;
            probe[t].data_mut()[i] = x0;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite evaluation near tensor {t} offset {i}"
                )));
            }
            let fd = (plus - minus) / (2.0 * fd_step);
            let an = analytic[t].data()[i];
            let rel = (an - fd).abs() / 1f64.max(an.abs()).max(fd.abs());
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = (t, i);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::functional::softmax;

    #[test]
    fn square_at_three() {
        let f = |p: &[Tensor]| {
            let x = p[0].data()[0];
            Ok((x * x, vec![Tensor::vector(vec![2.0 * x])]))
        };
        let r = grad_check(f, &[Tensor::vector(vec![3.0])], DEFAULT_FD_STEP).unwrap();
        assert!(r.max_relative_error < 1e-8, "{r:?}");
    }

    #[test]
    fn softmax_sum_is_constant() {
        let f = |p: &[Tensor]| {
            let s: f64 = softmax(p[0].data()).iter().sum();
            Ok((s, vec![Tensor::zeros(p[0].shape())]))
        };
        let x = Tensor::vector(vec![0.2, -1.0, 3.0, 0.5]);
        let r = grad_check(f, &[x], DEFAULT_FD_STEP).unwrap();
        assert!(r.max_relative_error < 1e-8, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let f = |p: &[Tensor]| {
            let x = p[0].data()[0];
            Ok((x * x, vec![Tensor::vector(vec![x])]))
        };
        let r = grad_check(f, &[Tensor::vector(vec![3.0])], DEFAULT_FD_STEP).unwrap();
        assert!(r.max_relative_error > 0.4);
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let f = |p: &[Tensor]| {
            let x = p[0].data()[0];
            Ok((x.ln(), vec![Tensor::vector(vec![1.0 / x])]))
        };
        let r = grad_check(f, &[Tensor::vector(vec![1e-7])], 1e-5);
        assert!(matches!(r, Err(Error::Numerical(_))));
    }
}
