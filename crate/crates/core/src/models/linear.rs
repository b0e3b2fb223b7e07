use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{argmax_lowest, ModelError};

/// Linear discriminant analysis with a ridge-regularized pooled covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lda {
    /// `K x d`, row k is `S^-1 mu_k`.
    pub weights: Array2<f64>,
    /// `-mu_k' S^-1 mu_k / 2 + ln prior_k`.
    pub bias: Array1<f64>,
}

fn class_means(x: ArrayView2<f64>, y: &[usize], k: usize) -> (Array2<f64>, Vec<usize>) {
    let mut means = Array2::zeros((k, x.ncols()));
    let mut counts = vec![0usize; k];
    for (row, &c) in x.axis_iter(Axis(0)).zip(y) {
        let mut m = means.row_mut(c);
        m += &row;
        counts[c] += 1;
    }
    for (mut m, &n) in means.axis_iter_mut(Axis(0)).zip(&counts) {
        m /= n as f64;
    }
    (means, counts)
}

impl Lda {
    pub fn fit(x: ArrayView2<f64>, y: &[usize], k: usize, ridge: f64) -> Result<Self, ModelError> {
        let (n, d) = x.dim();
        let (means, counts) = class_means(x, y, k);
        let mut centered = x.to_owned();
        for (mut row, &c) in centered.axis_iter_mut(Axis(0)).zip(y) {
            row -= &means.row(c);
        }
        let dof = (n - k).max(1) as f64;
        let mut cov = centered.t().dot(&centered) / dof;
        let lambda = ridge * cov.diag().sum() / d as f64;
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(ModelError::Numeric("pooled covariance is singular (zero trace)".into()));
        }
        cov.diag_mut().mapv_inplace(|v| v + lambda);
        let s = DMatrix::from_row_slice(d, d, cov.as_slice().expect("standard layout"));
        let chol = s.cholesky().ok_or_else(|| ModelError::Numeric("covariance not positive definite after ridge".into()))?;
        let mut weights = Array2::zeros((k, d));
        let mut bias = Array1::zeros(k);
        for c in 0..k {
            let mu = DVector::from_iterator(d, means.row(c).iter().copied());
            let w = chol.solve(&mu);
            if w.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Numeric("non-finite discriminant weights".into()));
            }
            bias[c] = -0.5 * mu.dot(&w) + (counts[c] as f64 / n as f64).ln();
            weights.row_mut(c).iter_mut().zip(w.iter()).for_each(|(a, b)| *a = *b);
        }
        Ok(Self { weights, bias })
    }

    pub fn scores(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weights.t()) + &self.bias
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        self.scores(x).axis_iter(Axis(0)).map(|r| argmax_lowest(r.as_slice().expect("row-major"))).collect()
    }
}

/// Gaussian naive Bayes with a floor on every per-class variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianNb {
    pub means: Array2<f64>,
    pub vars: Array2<f64>,
    pub log_priors: Array1<f64>,
}

impl GaussianNb {
    pub fn fit(x: ArrayView2<f64>, y: &[usize], k: usize, var_floor: f64) -> Self {
        let n = x.nrows();
        let (means, counts) = class_means(x, y, k);
        let mut vars = Array2::<f64>::zeros(means.dim());
        for (row, &c) in x.axis_iter(Axis(0)).zip(y) {
            let mut v = vars.row_mut(c);
            v.iter_mut().zip(row.iter().zip(means.row(c))).for_each(|(acc, (xi, mi))| *acc += (xi - mi).powi(2));
        }
        for (mut v, &cnt) in vars.axis_iter_mut(Axis(0)).zip(&counts) {
            v.mapv_inplace(|s| (s / cnt as f64).max(var_floor));
        }
        let log_priors = counts.iter().map(|&c| (c as f64 / n as f64).ln()).collect();
        Self { means, vars, log_priors }
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        let k = self.means.nrows();
        let log_norm: Vec<f64> = self.vars.axis_iter(Axis(0)).map(|v| -0.5 * v.iter().map(|s| s.ln()).sum::<f64>()).collect();
        x.axis_iter(Axis(0))
            .map(|row| {
                let scores: Vec<f64> = (0..k)
                    .map(|c| {
                        let quad: f64 = row
                            .iter()
                            .zip(self.means.row(c))
                            .zip(self.vars.row(c))
                            .map(|((xi, m), v)| (xi - m).powi(2) / v)
                            .sum();
                        self.log_priors[c] + log_norm[c] - 0.5 * quad
                    })
                    .collect();
                argmax_lowest(&scores)
            })
            .collect()
    }
}
