//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, ValueId};

/// Outcome of a gradient check at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradCheckReport {
    /// Max over coordinates of `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
    MaxRelError(f64),
    /// A coordinate straddles a non-differentiable locus (hinge kink,
    /// max/min tie); the comparison is meaningless there.
    SkippedNondifferentiable,
}

impl GradCheckReport {
    /// The error when checked, failing the assertion message otherwise.
    pub fn expect_checked(self) -> f64 {
        match self {
            GradCheckReport::MaxRelError(e) => e,
            GradCheckReport::SkippedNondifferentiable => {
                panic!("grad check skipped: point sits on a non-differentiable locus")
            }
        }
    }
}

/// Checks the analytic gradient of a scalar-valued function against
/// central finite differences at `point`.
///
/// `build` records the function once; each coordinate is then perturbed
/// in place and the tape replayed, so mined indices and other frozen
/// selections stay on the branch the backward pass differentiates.
/// Kinks are detected by comparing the two one-sided difference
/// quotients: a jump between them far above the smooth-curvature scale
/// marks the point as non-differentiable rather than failing.
pub fn grad_check<F>(build: F, point: &Tensor<f64>, step: f64) -> Result<GradCheckReport>
where
    F: FnOnce(&mut Graph<f64>, ValueId) -> Result<ValueId>,
{
    let mut g = Graph::<f64>::new();
    let x = g.leaf_grad(point);
    let out = build(&mut g, x)?;
    if g.values(out).len() != 1 {
        return Err(Error::NonScalarOutput { numel: g.values(out).len() });
    }
    g.backward_scalar(out)?;
    let analytic = g.grad(x).expect("leaf_grad input always receives a gradient").to_vec();

    let mut max_rel = 0.0f64;
    for i in 0..point.numel() {
        let x0 = point.values()[i];
        let f_plus = eval_at(&mut g, x, out, i, x0 + step)?;
        let f_minus = eval_at(&mut g, x, out, i, x0 - step)?;
        let f_mid = eval_at(&mut g, x, out, i, x0)?; // restore

        let g_plus = (f_plus - f_mid) / step;
        let g_minus = (f_mid - f_minus) / step;
        let scale = 1.0f64.max(g_plus.abs()).max(g_minus.abs());
        if (g_plus - g_minus).abs() > 1e-3 * scale {
            return Ok(GradCheckReport::SkippedNondifferentiable);
        }

        let numeric = (f_plus - f_minus) / (2.0 * step);
        let denom = 1.0f64.max(analytic[i].abs()).max(numeric.abs());
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(GradCheckReport::MaxRelError(max_rel))
}

fn eval_at(g: &mut Graph<f64>, x: ValueId, out: ValueId, i: usize, v: f64) -> Result<f64> {
    g.set_leaf_value(x, i, v)?;
    g.recompute();
    Ok(g.values(out)[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches_analytic() {
        let point = Tensor::new(vec![4], vec![0.5, -1.25, 2.0, 0.1]).unwrap();
        let report = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum_all(sq))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.expect_checked() < 1e-9, "{:?}", report);
    }

    #[test]
    fn relu_away_from_kink_checks() {
        let point = Tensor::new(vec![3], vec![0.7, -0.9, 1.4]).unwrap();
        let report = grad_check(
            |g, x| {
                let r = g.relu(x);
                Ok(g.sum_all(r))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.expect_checked() < 1e-9);
    }

    #[test]
    fn relu_at_kink_reports_skip() {
        let point = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let report = grad_check(
            |g, x| {
                let r = g.relu(x);
                Ok(g.sum_all(r))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert_eq!(report, GradCheckReport::SkippedNondifferentiable);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let point = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(|g, x| Ok(g.relu(x)), &point, 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonScalarOutput { numel: 2 }));
    }
}
