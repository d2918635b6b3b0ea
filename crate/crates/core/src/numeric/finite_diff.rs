//! Central finite differences, the reference for every analytic gradient.

use crate::error::{Error, Result};
use crate::numeric::tensor::Tensor;

/// `(f(x+h) - f(x-h)) / 2h` for every coordinate of every parameter tensor.
pub fn finite_diff_grad<L>(mut loss_fn: L, params: &[Tensor<f64>], h: f64) -> Result<Vec<Tensor<f64>>>
where
    L: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    let masked = finite_diff_grad_masked(|p| loss_fn(p).map(|v| (v, Vec::new())), params, h)?;
    masked
        .into_iter()
        .zip(params)
        .map(|(coords, p)| {
            Tensor::new(
                p.shape().to_vec(),
                coords.into_iter().map(|c| c.unwrap_or(0.0)).collect(),
            )
        })
        .collect()
}

/// Like [`finite_diff_grad`], but `loss_fn` also returns the kink signature of
/// its evaluation. A coordinate whose `x+h` or `x-h` signature differs from the
/// unperturbed one straddles a non-smooth point and is reported as `None`.
pub fn finite_diff_grad_masked<L>(mut loss_fn: L, params: &[Tensor<f64>], h: f64) -> Result<Vec<Vec<Option<f64>>>>
where
    L: FnMut(&[Tensor<f64>]) -> Result<(f64, Vec<u64>)>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Invalid(format!("step h must be positive, got {h}")));
    }
    let (_, base_sig) = loss_fn(params)?;
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut coords = Vec::with_capacity(params[t].len());
        for i in 0..params[t].len() {
            let orig = params[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let (plus, sig_plus) = loss_fn(&work)?;
            work[t].data_mut()[i] = orig - h;
            let (minus, sig_minus) = loss_fn(&work)?;
            work[t].data_mut()[i] = orig;
            if sig_plus != base_sig || sig_minus != base_sig {
                coords.push(None);
            } else {
                coords.push(Some((plus - minus) / (2.0 * h)));
            }
        }
        out.push(coords);
    }
    Ok(out)
}

/// Outcome of comparing analytic against numeric gradients.
#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    pub failures: Vec<GradMismatch>,
}

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Passes a coordinate when `|a - n| <= atol + rtol * |n|`.
pub fn compare_grads(analytic: &[Tensor<f64>], numeric: &[Vec<Option<f64>>], rtol: f64, atol: f64) -> GradCheck {
    let mut report = GradCheck::default();
    for (t, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (i, (&av, nv)) in a.data().iter().zip(n).enumerate() {
            match nv {
                None => report.skipped += 1,
                Some(nv) => {
                    report.checked += 1;
                    if (av - nv).abs() > atol + rtol * nv.abs() {
                        report.failures.push(GradMismatch {
                            tensor: t,
                            index: i,
                            analytic: av,
                            numeric: *nv,
                        });
                    }
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|p| Ok(p[0].item() * p[0].item()), &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!((g[0].item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function() {
        let params = [Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let g = finite_diff_grad(|_| Ok(4.2), &params, 1e-5).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_flat_region() {
        let g = finite_diff_grad(|p| Ok(p[0].item().max(0.0)), &[Tensor::scalar(-1.0)], 1e-5).unwrap();
        assert_eq!(g[0].item(), 0.0);
    }

    #[test]
    fn kink_crossing_is_masked() {
        let g = finite_diff_grad_masked(
            |p| {
                let x = p[0].item();
                Ok((x.max(0.0), vec![u64::from(x > 0.0)]))
            },
            &[Tensor::scalar(1e-7)],
            1e-5,
        )
        .unwrap();
        assert_eq!(g[0][0], None);
    }

    #[test]
    fn rejects_bad_step() {
        assert!(finite_diff_grad(|_| Ok(0.0), &[Tensor::scalar(0.0)], 0.0).is_err());
    }
}
