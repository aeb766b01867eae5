//! Weighted nonlinear least squares (Levenberg–Marquardt).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Converged once `‖δp‖ ≤ tol·(‖p‖ + tol)`.
    pub param_tolerance: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iterations: 200,
            param_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmFit {
    pub params: DVector<f64>,
    /// `(JᵀWJ)⁻¹` at the solution; absolute when weights are inverse variances.
    pub covariance: DMatrix<f64>,
    /// Weighted residual sum of squares.
    pub chi2: f64,
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

/// Minimizes `Σ wₖ (yₖ − f(xₖ; p))²`. `model` returns the value and the
/// gradient with respect to the parameters.
pub fn levenberg_marquardt<F>(
    model: F,
    x: &[f64],
    y: &[f64],
    weights: &[f64],
    p0: DVector<f64>,
    opts: LmOptions,
) -> Result<LmFit>
where
    F: Fn(&DVector<f64>, f64) -> (f64, DVector<f64>),
{
    assert_eq!(x.len(), y.len());
    assert_eq!(x.len(), weights.len());
    let np = p0.len();
    let eval = |p: &DVector<f64>| -> (f64, Vec<f64>, DMatrix<f64>) {
        let mut jac = DMatrix::zeros(x.len(), np);
        let mut res = Vec::with_capacity(x.len());
        let mut chi2 = 0.0;
        for (k, (&xk, &yk)) in x.iter().zip(y).enumerate() {
            let (v, g) = model(p, xk);
            let r = yk - v;
            chi2 += weights[k] * r * r;
            res.push(r);
            jac.row_mut(k).copy_from(&g.transpose());
        }
        (chi2, res, jac)
    };

    let mut p = p0;
    let (mut chi2, mut res, mut jac) = eval(&p);
    let mut lambda = 1e-3;
    let w = DVector::from_column_slice(weights);
    for iter in 1..=opts.max_iterations {
        let wj = DMatrix::from_fn(x.len(), np, |r, c| jac[(r, c)] * w[r]);
        let a = jac.transpose() * &wj;
        let g = wj.transpose() * DVector::from_column_slice(&res);
        let mut step_taken = false;
        while lambda < 1e16 {
            let mut damped = a.clone();
            for i in 0..np {
                damped[(i, i)] += lambda * a[(i, i)].max(1e-300);
            }
            let Some(delta) = damped.cholesky().map(|c| c.solve(&g)) else {
                lambda *= 10.0;
                continue;
            };
            let trial = &p + &delta;
            let (c2, r2, j2) = eval(&trial);
            if c2.is_finite() && c2 <= chi2 {
                let converged =
                    delta.norm() <= opts.param_tolerance * (p.norm() + opts.param_tolerance);
                p = trial;
                chi2 = c2;
                res = r2;
                jac = j2;
                lambda = (lambda / 10.0).max(1e-12);
                step_taken = true;
                if converged {
                    return finish(p, &jac, &w, chi2, res, iter);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !step_taken {
            // No downhill step exists at any damping: we sit at the minimum.
            return finish(p, &jac, &w, chi2, res, iter);
        }
    }
    Err(Error::FitFailure {
        iterations: opts.max_iterations,
        rss: chi2,
        residuals: res,
    })
}

fn finish(
    params: DVector<f64>,
    jac: &DMatrix<f64>,
    w: &DVector<f64>,
    chi2: f64,
    residuals: Vec<f64>,
    iterations: usize,
) -> Result<LmFit> {
    let wj = DMatrix::from_fn(jac.nrows(), jac.ncols(), |r, c| jac[(r, c)] * w[r]);
    let a = jac.transpose() * wj;
    let covariance = a.try_inverse().ok_or_else(|| Error::FitFailure {
        iterations,
        rss: chi2,
        residuals: residuals.clone(),
    })?;
    Ok(LmFit {
        params,
        covariance,
        chi2,
        residuals,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exponential_decay() {
        let x: Vec<f64> = (0..30).map(|k| k as f64 * 0.2).collect();
        let y: Vec<f64> = x.iter().map(|t| 3.0 * (-0.7 * t).exp() + 0.5).collect();
        let w = vec![1.0; x.len()];
        let model = |p: &DVector<f64>, t: f64| {
            let e = (-p[1] * t).exp();
            (
                p[0] * e + p[2],
                DVector::from_vec(vec![e, -p[0] * t * e, 1.0]),
            )
        };
        let fit = levenberg_marquardt(
            model,
            &x,
            &y,
            &w,
            DVector::from_vec(vec![1.0, 0.2, 0.0]),
            LmOptions::default(),
        )
        .unwrap();
        assert!((fit.params[0] - 3.0).abs() < 1e-8);
        assert!((fit.params[1] - 0.7).abs() < 1e-8);
        assert!((fit.params[2] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn iteration_cap_reports_failure() {
        let x: Vec<f64> = (0..10).map(|k| k as f64).collect();
        let y: Vec<f64> = x.iter().map(|t| (0.3 * t).sin()).collect();
        let model = |p: &DVector<f64>, t: f64| {
            ((p[0] * t).sin(), DVector::from_vec(vec![t * (p[0] * t).cos()]))
        };
        let opts = LmOptions {
            max_iterations: 1,
            param_tolerance: 1e-30,
        };
        let err = levenberg_marquardt(model, &x, &y, &[1.0; 10], DVector::from_vec(vec![0.1]), opts);
        assert!(matches!(err, Err(Error::FitFailure { residuals, .. }) if residuals.len() == 10));
    }
}
