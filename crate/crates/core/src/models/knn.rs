use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{ModelError, Standardizer};

/// k-nearest neighbours on standardized features, Euclidean distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Knn {
    pub k: usize,
    pub n_classes: usize,
    pub scaler: Standardizer,
    pub x: Array2<f64>,
    pub y: Vec<usize>,
    sq_norms: Array1<f64>,
}

/// Query rows per distance block; bounds the `block x n` scratch matrix.
const BLOCK: usize = 256;
/// Extra candidates kept from the f32 pass before exact rescoring.
const MARGIN: usize = 16;

impl Knn {
    pub fn fit(x: ArrayView2<f64>, y: &[usize], k: usize) -> Result<Self, ModelError> {
        if k == 0 || k > x.nrows() {
            return Err(ModelError::Argument(format!("k = {k} with {} training rows", x.nrows())));
        }
        let scaler = Standardizer::fit(x);
        let xs = scaler.transform(x);
        let sq_norms = xs.map_axis(Axis(1), |r| r.dot(&r));
        let n_classes = y.iter().max().map_or(0, |m| m + 1);
        Ok(Self { k, n_classes, scaler, x: xs, y: y.to_vec(), sq_norms })
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        let q = self.scaler.transform(x);
        let mut out = Vec::with_capacity(q.nrows());
        let x32 = self.x.mapv(|v| v as f32);
        let keep = (self.k + MARGIN).min(self.x.nrows());
        let mut approx: Vec<(f32, usize)> = Vec::with_capacity(self.x.nrows());
        let mut cand: Vec<(f64, usize)> = Vec::with_capacity(keep);
        for chunk in q.axis_chunks_iter(Axis(0), BLOCK) {
            // shortlist in single precision, then rank the shortlist exactly
            let cross = chunk.mapv(|v| v as f32).dot(&x32.t());
            for (row, cross_row) in chunk.axis_iter(Axis(0)).zip(cross.axis_iter(Axis(0))) {
                approx.clear();
                approx.extend(cross_row.iter().zip(&self.sq_norms).enumerate().map(|(i, (c, n))| (*n as f32 - 2.0 * c, i)));
                if keep < approx.len() {
                    approx.select_nth_unstable_by(keep - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                }
                cand.clear();
                cand.extend(approx[..keep].iter().map(|&(_, i)| {
                    let d: f64 = row.iter().zip(self.x.row(i)).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d, i)
                }));
                out.push(self.vote(&mut cand));
            }
        }
        out
    }

    fn vote(&self, cand: &mut [(f64, usize)]) -> usize {
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let k = self.k.min(cand.len());
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, by_dist);
        }
        let mut votes = vec![0usize; self.n_classes];
        let mut dist = vec![0.0f64; self.n_classes];
        for &(d, i) in &cand[..k] {
            votes[self.y[i]] += 1;
            dist[self.y[i]] += d.sqrt();
        }
        // most votes, then smaller mean distance, then lowest class
        let mut best = 0;
        for c in 1..self.n_classes {
            if votes[c] == 0 {
                continue;
            }
            let better = votes[c] > votes[best]
                || (votes[c] == votes[best] && dist[c] / (votes[c] as f64) < dist[best] / (votes[best].max(1) as f64));
            if better {
                best = c;
            }
        }
        best
    }
}
