use ndarray::{ArrayView2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmax_lowest, Hyper, ModelError};
use crate::synth::mix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    /// Class frequencies of the training samples that reached the leaf.
    Leaf { probs: Vec<f64> },
}

/// CART classification tree; `x <= threshold` goes left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_probs(&self, x: &[f64]) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split { feature, threshold, left, right } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
                Node::Leaf { probs } => return probs,
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }
}

/// Random forest of Gini trees on bootstrap samples. Candidate thresholds
/// are midpoints between per-feature quantile bins of the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub n_classes: usize,
    pub trees: Vec<Tree>,
}

/// Feature matrix reduced to bin ids, column-major.
struct Binned {
    n: usize,
    bins: Vec<u8>,
    /// Per feature, thresholds between consecutive bins.
    edges: Vec<Vec<f64>>,
}

impl Binned {
    fn new(x: ArrayView2<f64>, max_bins: usize) -> Self {
        let (n, d) = x.dim();
        let max_bins = max_bins.clamp(2, 256);
        let mut bins = vec![0u8; n * d];
        let mut edges = Vec::with_capacity(d);
        for (f, col) in x.axis_iter(Axis(1)).enumerate() {
            let mut sorted: Vec<f64> = col.to_vec();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup();
            let reps: Vec<f64> = if sorted.len() <= max_bins {
                sorted
            } else {
                let mut q: Vec<f64> = (0..max_bins).map(|b| sorted[b * (sorted.len() - 1) / (max_bins - 1)]).collect();
                q.dedup();
                q
            };
            let e: Vec<f64> = reps.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
            for (i, v) in col.iter().enumerate() {
                bins[f * n + i] = e.partition_point(|t| t < v) as u8;
            }
            edges.push(e);
        }
        Self { n, bins, edges }
    }

    fn column(&self, f: usize) -> &[u8] {
        &self.bins[f * self.n..(f + 1) * self.n]
    }
}

/// Nodes smaller than this are split by sorting instead of histograms.
const SORT_BELOW: usize = 384;

struct Builder<'a> {
    data: &'a Binned,
    y: &'a [usize],
    /// Bootstrap multiplicity of each training row.
    weight: Vec<u32>,
    k: usize,
    max_depth: usize,
    min_leaf: usize,
    mtry: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    pairs: Vec<(u8, u16, u32)>,
    hist: Vec<u32>,
    runs: Vec<(u8, u16, u32)>,
}

fn gini_weighted(counts: &[u32], total: u32) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = f64::from(total);
    let sq: f64 = counts.iter().map(|&c| f64::from(c) * f64::from(c)).sum();
    t - sq / t
}

impl Builder<'_> {
    fn leaf(&mut self, samples: &[u32]) -> usize {
        let mut probs = vec![0.0; self.k];
        for &s in samples {
            probs[self.y[s as usize]] += f64::from(self.weight[s as usize]);
        }
        let n: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= n);
        self.nodes.push(Node::Leaf { probs });
        self.nodes.len() - 1
    }

    fn build(&mut self, samples: &mut [u32], depth: usize) -> usize {
        let mut counts = vec![0u32; self.k];
        for &s in samples.iter() {
            counts[self.y[s as usize]] += self.weight[s as usize];
        }
        let n: u32 = counts.iter().sum();
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= self.max_depth || (n as usize) < 2 * self.min_leaf {
            return self.leaf(samples);
        }
        let parent = gini_weighted(&counts, n);
        let d = self.data.edges.len();
        let features = sample(&mut self.rng, d, self.mtry.min(d));
        let mut best: Option<(f64, usize, usize)> = None;
        let mut left = vec![0u32; self.k];
        let mut right = vec![0u32; self.k];
        for f in features.iter() {
            if self.data.edges[f].is_empty() {
                continue;
            }
            let col = self.data.column(f);
            self.runs.clear();
            if samples.len() >= SORT_BELOW {
                let (mut lo, mut hi) = (u8::MAX, 0u8);
                for &s in samples.iter() {
                    let b = col[s as usize];
                    lo = lo.min(b);
                    hi = hi.max(b);
                }
                let width = (hi - lo) as usize + 1;
                self.hist.clear();
                self.hist.resize(width * self.k, 0);
                for &s in samples.iter() {
                    let s = s as usize;
                    self.hist[(col[s] - lo) as usize * self.k + self.y[s]] += self.weight[s];
                }
                for (i, h) in self.hist.chunks_exact(self.k).enumerate() {
                    for (c, &cnt) in h.iter().enumerate() {
                        if cnt > 0 {
                            self.runs.push((lo + i as u8, c as u16, cnt));
                        }
                    }
                }
            } else {
                self.pairs.clear();
                self.pairs.extend(samples.iter().map(|&s| {
                    let s = s as usize;
                    (col[s], self.y[s] as u16, self.weight[s])
                }));
                self.pairs.sort_unstable_by_key(|p| (p.0, p.1));
                for &(b, c, w) in &self.pairs {
                    match self.runs.last_mut() {
                        Some(r) if r.0 == b && r.1 == c => r.2 += w,
                        _ => self.runs.push((b, c, w)),
                    }
                }
            }
            // runs are (bin, class, count) in ascending bin order
            left.iter_mut().for_each(|c| *c = 0);
            right.copy_from_slice(&counts);
            let mut n_left = 0u32;
            let mut i = 0;
            while i < self.runs.len() {
                let bin = self.runs[i].0;
                while i < self.runs.len() && self.runs[i].0 == bin {
                    let (_, c, cnt) = self.runs[i];
                    left[c as usize] += cnt;
                    right[c as usize] -= cnt;
                    n_left += cnt;
                    i += 1;
                }
                let n_right = n - n_left;
                if n_right == 0 {
                    break;
                }
                if (n_left as usize) < self.min_leaf || (n_right as usize) < self.min_leaf {
                    continue;
                }
                let impurity = gini_weighted(&left, n_left) + gini_weighted(&right, n_right);
                if best.map_or(true, |(bi, _, _)| impurity < bi) {
                    best = Some((impurity, f, bin as usize));
                }
            }
        }
        let Some((impurity, feature, bin)) = best else {
            return self.leaf(samples);
        };
        if parent - impurity <= 1e-12 * parent {
            return self.leaf(samples);
        }
        let col = self.data.column(feature);
        let mut split = 0;
        for i in 0..samples.len() {
            if col[samples[i] as usize] as usize <= bin {
                samples.swap(i, split);
                split += 1;
            }
        }
        let idx = self.nodes.len();
        self.nodes.push(Node::Leaf { probs: Vec::new() });
        let (l, r) = samples.split_at_mut(split);
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        self.nodes[idx] = Node::Split { feature, threshold: self.data.edges[feature][bin], left, right };
        idx
    }
}

impl Forest {
    pub fn fit(x: ArrayView2<f64>, y: &[usize], k: usize, hyper: &Hyper, seed: u64) -> Result<Self, ModelError> {
        if hyper.rf_trees == 0 || hyper.rf_min_leaf == 0 {
            return Err(ModelError::Argument("forest needs trees >= 1 and min leaf >= 1".into()));
        }
        let data = Binned::new(x, hyper.rf_max_bins);
        let n = x.nrows();
        let mtry = ((x.ncols() as f64).sqrt().round() as usize).max(1);
        let trees = (0..hyper.rf_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, t as u64]));
                let mut weight = vec![0u32; n];
                for _ in 0..n {
                    weight[rng.gen_range(0..n)] += 1;
                }
                let mut samples: Vec<u32> = (0..n as u32).filter(|&i| weight[i as usize] > 0).collect();
                let mut b = Builder {
                    data: &data,
                    y,
                    weight,
                    k,
                    max_depth: hyper.rf_max_depth,
                    min_leaf: hyper.rf_min_leaf,
                    mtry,
                    rng,
                    nodes: Vec::new(),
                    pairs: Vec::new(),
                    hist: Vec::new(),
                    runs: Vec::new(),
                };
                b.build(&mut samples, 0);
                Tree { nodes: b.nodes }
            })
            .collect();
        Ok(Self { n_classes: k, trees })
    }

    pub fn proba(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_classes];
        for t in &self.trees {
            acc.iter_mut().zip(t.leaf_probs(x)).for_each(|(a, p)| *a += p);
        }
        let n = self.trees.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        let rows: Vec<Vec<f64>> = x.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
        rows.par_iter().map(|r| argmax_lowest(&self.proba(r))).collect()
    }
}
