use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax_lowest, ModelError, Standardizer};

/// One-vs-rest linear SVM trained with Pegasos sub-gradient steps.
/// The bias is a weight on a constant feature and is regularized with the
/// rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub scaler: Standardizer,
    /// `K x (d + 1)`; the last column multiplies the constant 1.
    pub weights: Array2<f64>,
}

impl LinearSvm {
    pub fn fit(x: ArrayView2<f64>, y: &[usize], k: usize, lambda: f64, epochs: usize, seed: u64) -> Result<Self, ModelError> {
        if !(lambda > 0.0) || epochs == 0 {
            return Err(ModelError::Argument(format!("lambda {lambda}, epochs {epochs}")));
        }
        let scaler = Standardizer::fit(x);
        let xs = scaler.transform(x);
        let (n, d) = xs.dim();
        let dim = d + 1;
        // w_c = scale * v_c, so the per-step shrink is O(1)
        let mut v = vec![0.0f64; k * dim];
        let mut scale = 1.0f64;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = xs.as_slice().expect("standard layout");
        let mut t = 0u64;
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                t += 1;
                let eta = 1.0 / (lambda * t as f64);
                let shrink = 1.0 - eta * lambda;
                let xi = &data[i * d..(i + 1) * d];
                let old_scale = scale;
                if shrink <= 0.0 {
                    v.iter_mut().for_each(|e| *e = 0.0);
                    scale = 1.0;
                } else {
                    scale *= shrink;
                }
                for c in 0..k {
                    let vc = &mut v[c * dim..(c + 1) * dim];
                    let label = if y[i] == c { 1.0 } else { -1.0 };
                    let dot: f64 = vc[..d].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() + vc[d];
                    if label * dot * old_scale < 1.0 {
                        let step = eta * label / scale;
                        vc[..d].iter_mut().zip(xi).for_each(|(a, b)| *a += step * b);
                        vc[d] += step;
                    }
                }
            }
        }
        let weights = Array2::from_shape_vec((k, dim), v.into_iter().map(|e| e * scale).collect()).expect("shape");
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Numeric("SVM weights diverged".into()));
        }
        Ok(Self { scaler, weights })
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        let xs = self.scaler.transform(x);
        let d = xs.ncols();
        let w = self.weights.slice(ndarray::s![.., ..d]);
        let b = self.weights.column(d);
        let scores = xs.dot(&w.t()) + &b;
        scores.axis_iter(Axis(0)).map(|r| argmax_lowest(&r.to_vec())).collect()
    }
}
