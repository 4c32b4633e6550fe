//! Levenberg–Marquardt for small dense problems.

use nalgebra::{DMatrix, DVector};

pub trait LeastSquares {
    fn residuals(&self, p: &[f64]) -> Vec<f64>;

    /// Jacobian of the residuals (rows: residuals, columns: parameters).
    /// Defaults to central differences.
    fn jacobian(&self, p: &[f64]) -> DMatrix<f64> {
        numeric_jacobian(|q| self.residuals(q), p)
    }
}

pub fn numeric_jacobian<F: Fn(&[f64]) -> Vec<f64>>(f: F, p: &[f64]) -> DMatrix<f64> {
    let r0 = f(p);
    let mut j = DMatrix::zeros(r0.len(), p.len());
    let mut q = p.to_vec();
    for k in 0..p.len() {
        let h = 1e-7 * p[k].abs().max(1e-7);
        q[k] = p[k] + h;
        let up = f(&q);
        q[k] = p[k] - h;
        let down = f(&q);
        q[k] = p[k];
        for i in 0..r0.len() {
            j[(i, k)] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    j
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Stop when the relative cost decrease falls below this.
    pub ftol: f64,
    /// Stop when the relative parameter step falls below this.
    pub xtol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            ftol: 1e-15,
            xtol: 1e-13,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub params: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Sum of squared residuals.
    pub rss: f64,
    /// `s²(JᵀJ)⁻¹` with `s² = rss/(n − p)`; `None` when singular.
    pub covariance: Option<DMatrix<f64>>,
    pub iterations: usize,
    pub converged: bool,
}

pub fn levenberg_marquardt<M: LeastSquares + ?Sized>(
    model: &M,
    p0: &[f64],
    opts: &LmOptions,
) -> LmResult {
    let mut p = DVector::from_column_slice(p0);
    let mut r = DVector::from_vec(model.residuals(p.as_slice()));
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let j = model.jacobian(p.as_slice());
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for k in 0..a.nrows() {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let trial = &p + &step;
            let rt = DVector::from_vec(model.residuals(trial.as_slice()));
            let ct = rt.norm_squared();
            if ct.is_finite() && ct <= cost {
                let small_step = step.norm() <= opts.xtol * (p.norm() + opts.xtol);
                let small_gain = cost - ct <= opts.ftol * cost;
                p = trial;
                r = rt;
                cost = ct;
                lambda = (lambda / 3.0).max(1e-15);
                improved = true;
                if small_step || small_gain {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            // No descent direction left: at a minimum to working precision.
            converged = true;
        }
        if converged {
            break;
        }
    }

    let j = model.jacobian(p.as_slice());
    let n = r.len();
    let np = p.len();
    let covariance = if n > np {
        (j.transpose() * &j)
            .try_inverse()
            .map(|inv| inv * (cost / (n - np) as f64))
    } else {
        None
    };
    LmResult {
        params: p.as_slice().to_vec(),
        residuals: r.as_slice().to_vec(),
        rss: cost,
        covariance,
        iterations,
        converged,
    }
}
