//! L2-regularized logistic regression.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::tree::check_xy;
use crate::error::{Error, Result};
use crate::stats::{sigmoid, softplus};

pub const GRAD_TOL: f64 = 1e-6;
pub const MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl LogisticModel {
    pub fn decision(&self, row: ArrayView1<f64>) -> f64 {
        self.intercept + row.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn predict_proba(&self, x: &Array2<f64>) -> Vec<f64> {
        x.rows().into_iter().map(|r| sigmoid(self.decision(r))).collect()
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<u8> {
        x.rows().into_iter().map(|r| u8::from(self.decision(r) > 0.0)).collect()
    }
}

/// Penalized negative log-likelihood `Σ logloss + (l2/2)‖w‖²`; the intercept
/// is not penalized.
pub fn objective(x: &Array2<f64>, y: &[u8], l2: f64, w: &[f64], b: f64) -> f64 {
    let data: f64 = x
        .rows()
        .into_iter()
        .zip(y)
        .map(|(r, &t)| {
            let z = b + r.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
            softplus(z) - t as f64 * z
        })
        .sum();
    data + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
}

/// Gradient of [`objective`], weights first and intercept last.
pub fn gradient(x: &Array2<f64>, y: &[u8], l2: f64, w: &[f64], b: f64) -> Vec<f64> {
    let p = w.len();
    let mut g = vec![0.0; p + 1];
    for (r, &t) in x.rows().into_iter().zip(y) {
        let z = b + r.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
        let e = sigmoid(z) - t as f64;
        for (gj, xj) in g.iter_mut().zip(r.iter()) {
            *gj += e * xj;
        }
        g[p] += e;
    }
    for j in 0..p {
        g[j] += l2 * w[j];
    }
    g
}

/// Damped Newton iterations with backtracking line search, stopping when the
/// gradient norm drops to [`GRAD_TOL`] or after [`MAX_ITER`] iterations.
pub fn fit_logistic_regression(x: &Array2<f64>, y: &[u8], l2: f64) -> Result<LogisticModel> {
    check_xy(x, y)?;
    if x.nrows() < 2 {
        return Err(Error::InvalidArgument("logistic regression needs at least 2 rows".into()));
    }
    if !(l2 >= 0.0) {
        return Err(Error::InvalidArgument(format!("l2 penalty {l2} must be non-negative")));
    }
    let p = x.ncols();
    let mut theta = vec![0.0; p + 1];
    let mut loss = objective(x, y, l2, &theta[..p], theta[p]);
    let mut grad = gradient(x, y, l2, &theta[..p], theta[p]);
    let mut iterations = 0;
    while iterations < MAX_ITER {
        let gnorm = norm(&grad);
        if gnorm <= GRAD_TOL {
            break;
        }
        iterations += 1;
        let dir = newton_direction(x, l2, &theta, &grad).unwrap_or_else(|| grad.clone());
        let slope: f64 = grad.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t - step * d).collect();
            let l = objective(x, y, l2, &cand[..p], cand[p]);
            if !l.is_finite() {
                return Err(Error::Numerical(format!("non-finite logistic loss at iteration {iterations}")));
            }
            if l <= loss - 1e-4 * step * slope {
                theta = cand;
                loss = l;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        grad = gradient(x, y, l2, &theta[..p], theta[p]);
        if !moved {
            // no representable decrease remains
            break;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite logistic loss".into()));
    }
    Ok(LogisticModel {
        intercept: theta[p],
        weights: theta[..p].to_vec(),
        iterations,
        grad_norm: norm(&grad),
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn newton_direction(x: &Array2<f64>, l2: f64, theta: &[f64], grad: &[f64]) -> Option<Vec<f64>> {
    let (n, p) = x.dim();
    let mut h = DMatrix::<f64>::zeros(p + 1, p + 1);
    let mut row = vec![0.0; p + 1];
    for i in 0..n {
        for j in 0..p {
            row[j] = x[[i, j]];
        }
        row[p] = 1.0;
        let z: f64 = row.iter().zip(theta).map(|(a, b)| a * b).sum();
        let s = sigmoid(z);
        let wgt = s * (1.0 - s);
        if wgt == 0.0 {
            continue;
        }
        for a in 0..=p {
            let ra = wgt * row[a];
            for b in a..=p {
                h[(a, b)] += ra * row[b];
            }
        }
    }
    for a in 0..=p {
        for b in 0..a {
            h[(a, b)] = h[(b, a)];
        }
        h[(a, a)] += if a < p { l2 } else { 0.0 } + 1e-10;
    }
    let chol = h.cholesky()?;
    let d = chol.solve(&DVector::from_column_slice(grad));
    d.iter().all(|v| v.is_finite()).then(|| d.as_slice().to_vec())
}
