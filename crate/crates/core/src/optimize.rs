//! Quasi-Newton minimization (BFGS with backtracking line search).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    /// Stop once `‖∇f‖∞ ≤ gradient_tolerance`.
    pub gradient_tolerance: f64,
    /// Stop once `‖Δx‖ ≤ param_tolerance·(1 + ‖x‖)`.
    pub param_tolerance: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iterations: 5000,
            gradient_tolerance: 1e-8,
            param_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub initial_value: f64,
    pub iterations: usize,
}

/// Minimizes `f`, where `fg(x)` returns the objective and its gradient.
pub fn bfgs<F>(fg: F, x0: DVector<f64>, opts: BfgsOptions) -> Result<Minimum>
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = x0.len();
    let mut x = x0;
    let (mut fx, mut g) = fg(&x);
    let initial_value = fx;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut trace = vec![fx];
    let mut first = true;

    for iter in 0..opts.max_iterations {
        if g.amax() <= opts.gradient_tolerance {
            return Ok(Minimum {
                x,
                value: fx,
                initial_value,
                iterations: iter,
            });
        }
        let mut dir = -(&h * &g);
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            h = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = g.dot(&dir);
        }
        if first {
            // Scale the first steepest-descent step to a modest length.
            let scale = (1.0 + x.norm()) * 1e-2 / dir.norm().max(1e-300);
            if scale < 1.0 {
                dir *= scale;
                slope *= scale;
            }
        }

        let mut step = 1.0;
        let mut accepted = None;
        while step > 1e-20 {
            let trial = &x + &dir * step;
            let (ft, gt) = fg(&trial);
            if ft.is_finite() && ft <= fx + 1e-4 * step * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            // No decrease along a descent direction: numerically stationary.
            return Ok(Minimum {
                x,
                value: fx,
                initial_value,
                iterations: iter,
            });
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if first && sy > 0.0 {
            h *= sy / y.dot(&y);
        }
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * ((1.0 + rho * yhy) * rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        first = false;

        let small_step = s.norm() <= opts.param_tolerance * (1.0 + x_new.norm());
        x = x_new;
        fx = f_new;
        g = g_new;
        trace.push(fx);
        if small_step {
            return Ok(Minimum {
                x,
                value: fx,
                initial_value,
                iterations: iter + 1,
            });
        }
    }
    Err(Error::Convergence {
        iterations: opts.max_iterations,
        best_objective: fx,
        best_params: x.iter().copied().collect(),
        objective_trace: trace,
    })
}
