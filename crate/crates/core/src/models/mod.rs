//! The five classical decoders, evaluation and model persistence.
//!
//! All models take an `n x d` feature matrix and `u8` class labels. Labels
//! are kept sorted; every argmax breaks ties towards the lowest class id.

mod forest;
mod knn;
mod linear;
mod svm;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use forest::{Forest, Tree};
pub use knn::Knn;
pub use linear::{GaussianNb, Lda};
pub use svm::LinearSvm;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("expected {expected} features, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Lda,
    NaiveBayes,
    Knn,
    LinearSvm,
    RandomForest,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] =
        [ModelKind::Lda, ModelKind::NaiveBayes, ModelKind::Knn, ModelKind::LinearSvm, ModelKind::RandomForest];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lda => "LDA",
            ModelKind::NaiveBayes => "NaiveBayes",
            ModelKind::Knn => "KNN",
            ModelKind::LinearSvm => "SVM",
            ModelKind::RandomForest => "RandomForest",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "lda" => Some(ModelKind::Lda),
            "naivebayes" | "nb" => Some(ModelKind::NaiveBayes),
            "knn" => Some(ModelKind::Knn),
            "svm" | "linearsvm" => Some(ModelKind::LinearSvm),
            "rf" | "randomforest" | "randomforests" => Some(ModelKind::RandomForest),
            _ => None,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    /// Ridge added to the pooled covariance, as a fraction of trace/d.
    pub lda_ridge: f64,
    pub nb_var_floor: f64,
    pub knn_k: usize,
    pub svm_lambda: f64,
    pub svm_epochs: usize,
    pub rf_trees: usize,
    pub rf_max_depth: usize,
    pub rf_min_leaf: usize,
    /// Candidate thresholds per feature.
    pub rf_max_bins: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lda_ridge: 1e-3,
            nb_var_floor: 1e-9,
            knn_k: 5,
            svm_lambda: 1e-4,
            svm_epochs: 50,
            rf_trees: 100,
            rf_max_depth: 16,
            rf_min_leaf: 2,
            rf_max_bins: 256,
        }
    }
}

/// Train-set mean and standard deviation per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("non-empty training set");
        let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 0.0 && s.is_finite() { s } else { 1.0 });
        Self { mean, std }
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.std
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Params {
    Lda(Lda),
    NaiveBayes(GaussianNb),
    Knn(Knn),
    LinearSvm(LinearSvm),
    RandomForest(Forest),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub kind: ModelKind,
    /// Sorted distinct training labels.
    pub classes: Vec<u8>,
    pub feature_dim: usize,
    /// Identifies the feature layout the model was trained on.
    pub layout_tag: Option<String>,
    pub params: Params,
}

/// Index of the largest score; ties (within a relative 1e-12) go to the
/// lowest index.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        let b = scores[best];
        if s > b && (s - b) > 1e-12 * s.abs().max(b.abs()).max(f64::MIN_POSITIVE) {
            best = i;
        }
    }
    best
}

fn class_index(y: &[u8]) -> Result<(Vec<u8>, Vec<usize>), ModelError> {
    let mut classes = y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let idx: Vec<usize> = y.iter().map(|l| classes.binary_search(l).expect("label present")).collect();
    let mut counts = vec![0usize; classes.len()];
    for &i in &idx {
        counts[i] += 1;
    }
    if let Some((c, n)) = classes.iter().zip(&counts).find(|(_, &n)| n < 2) {
        return Err(ModelError::Data(format!("class {c} has {n} samples, need at least 2")));
    }
    if classes.len() < 2 {
        return Err(ModelError::Data("need at least two classes".into()));
    }
    Ok((classes, idx))
}

/// Fits a model of the given kind. `seed` drives the SVM shuffle and the
/// forest's bootstrap and feature sampling.
pub fn train(kind: ModelKind, x: ArrayView2<f64>, y: &[u8], hyper: &Hyper, seed: u64) -> Result<TrainedModel, ModelError> {
    if x.nrows() != y.len() {
        return Err(ModelError::Argument(format!("{} rows but {} labels", x.nrows(), y.len())));
    }
    if x.ncols() == 0 {
        return Err(ModelError::Argument("zero-dimensional features".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Numeric("non-finite feature value".into()));
    }
    let (classes, yi) = class_index(y)?;
    let k = classes.len();
    let params = match kind {
        ModelKind::Lda => Params::Lda(Lda::fit(x, &yi, k, hyper.lda_ridge)?),
        ModelKind::NaiveBayes => Params::NaiveBayes(GaussianNb::fit(x, &yi, k, hyper.nb_var_floor)),
        ModelKind::Knn => Params::Knn(Knn::fit(x, &yi, hyper.knn_k)?),
        ModelKind::LinearSvm => Params::LinearSvm(LinearSvm::fit(x, &yi, k, hyper.svm_lambda, hyper.svm_epochs, seed)?),
        ModelKind::RandomForest => Params::RandomForest(Forest::fit(x, &yi, k, hyper, seed)?),
    };
    Ok(TrainedModel { kind, classes, feature_dim: x.ncols(), layout_tag: None, params })
}

impl TrainedModel {
    pub fn with_layout_tag(mut self, tag: &str) -> Self {
        self.layout_tag = Some(tag.to_string());
        self
    }

    fn check_dim(&self, got: usize) -> Result<(), ModelError> {
        if got != self.feature_dim {
            return Err(ModelError::Dimension { expected: self.feature_dim, got });
        }
        Ok(())
    }

    /// Class index (into `classes`) per row.
    pub fn predict_index(&self, x: ArrayView2<f64>) -> Result<Vec<usize>, ModelError> {
        self.check_dim(x.ncols())?;
        Ok(match &self.params {
            Params::Lda(m) => m.predict(x),
            Params::NaiveBayes(m) => m.predict(x),
            Params::Knn(m) => m.predict(x),
            Params::LinearSvm(m) => m.predict(x),
            Params::RandomForest(m) => m.predict(x),
        })
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<u8>, ModelError> {
        Ok(self.predict_index(x)?.into_iter().map(|i| self.classes[i]).collect())
    }

    pub fn predict_one(&self, x: ArrayView1<f64>) -> Result<u8, ModelError> {
        let row = x.insert_axis(Axis(0));
        Ok(self.predict(row)?[0])
    }

    pub fn evaluate(&self, x: ArrayView2<f64>, y: &[u8]) -> Result<Evaluation, ModelError> {
        if y.is_empty() {
            return Err(ModelError::Argument("empty test set".into()));
        }
        if x.nrows() != y.len() {
            return Err(ModelError::Argument(format!("{} rows but {} labels", x.nrows(), y.len())));
        }
        let pred = self.predict(x)?;
        Ok(Evaluation::from_predictions(y, &pred))
    }

    const MAGIC: [u8; 4] = *b"MYOM";
    const VERSION: u32 = 1;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Self::MAGIC.to_vec();
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        out.extend(bincode::serialize(self).expect("model serializes"));
        out
    }

    /// Parses a saved model; with `expected_layout` set, rejects models built
    /// on a different feature layout.
    pub fn from_bytes(bytes: &[u8], expected_layout: Option<&str>) -> Result<Self, ModelError> {
        if bytes.len() < 8 || bytes[..4] != Self::MAGIC {
            return Err(ModelError::Format("not a model file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != Self::VERSION {
            return Err(ModelError::Format(format!("unsupported model version {version}")));
        }
        let model: TrainedModel = bincode::deserialize(&bytes[8..]).map_err(|e| ModelError::Format(e.to_string()))?;
        if let Some(want) = expected_layout {
            if model.layout_tag.as_deref() != Some(want) {
                return Err(ModelError::Format(format!(
                    "feature layout {:?} does not match {want:?}",
                    model.layout_tag
                )));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path, expected_layout: Option<&str>) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?, expected_layout)
    }
}

/// Rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<u8>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    /// Class axis is the sorted union of true and predicted labels.
    pub fn from_labels(truth: &[u8], pred: &[u8]) -> Self {
        let mut classes: Vec<u8> = truth.iter().chain(pred).copied().collect();
        classes.sort_unstable();
        classes.dedup();
        Self::with_classes(classes, truth, pred)
    }

    pub fn with_classes(classes: Vec<u8>, truth: &[u8], pred: &[u8]) -> Self {
        assert_eq!(truth.len(), pred.len());
        let k = classes.len();
        let mut counts = vec![vec![0u64; k]; k];
        let pos = |l: &u8| classes.binary_search(l).expect("label on the class axis");
        for (t, p) in truth.iter().zip(pred) {
            counts[pos(t)][pos(p)] += 1;
        }
        Self { classes, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    /// Each row divided by its sum (zero rows stay zero).
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|r| {
                let s: u64 = r.iter().sum();
                r.iter().map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 }).collect()
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for c in &self.classes {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for (c, row) in self.classes.iter().zip(&self.counts) {
            out.push_str(&c.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

impl Evaluation {
    pub fn from_predictions(truth: &[u8], pred: &[u8]) -> Self {
        let confusion = ConfusionMatrix::from_labels(truth, pred);
        let mut per_class = vec![0u64; confusion.classes.len()];
        for t in truth {
            per_class[confusion.classes.binary_search(t).expect("true label on axis")] += 1;
        }
        assert_eq!(confusion.row_sums(), per_class, "confusion rows must sum to class counts");
        let matches = truth.iter().zip(pred).filter(|(a, b)| a == b).count();
        let accuracy = matches as f64 / truth.len() as f64;
        assert_eq!(confusion.trace() as usize, matches);
        Self { accuracy, confusion }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax_lowest(&[2.0, 2.0 + 1e-15]), 0);
        assert_eq!(argmax_lowest(&[-1.0, 0.0]), 1);
    }

    #[test]
    fn tiny_class_rejected() {
        let x = array![[0.0], [1.0], [2.0]];
        let err = train(ModelKind::Lda, x.view(), &[1, 1, 2], &Hyper::default(), 0).unwrap_err();
        assert!(matches!(err, ModelError::Data(_)));
    }

    #[test]
    fn constant_features_are_singular_for_lda() {
        let x = Array2::<f64>::zeros((6, 3));
        let err = train(ModelKind::Lda, x.view(), &[1, 1, 1, 2, 2, 2], &Hyper::default(), 0).unwrap_err();
        assert!(matches!(err, ModelError::Numeric(_)));
    }

    #[test]
    fn dimension_checked() {
        let x = array![[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]];
        let m = train(ModelKind::NaiveBayes, x.view(), &[1, 1, 2, 2], &Hyper::default(), 0).unwrap();
        let err = m.predict(Array2::<f64>::zeros((1, 3)).view()).unwrap_err();
        assert!(matches!(err, ModelError::Dimension { expected: 2, got: 3 }));
    }

    #[test]
    fn confusion_csv_layout() {
        let cm = ConfusionMatrix::from_labels(&[1, 1, 2], &[1, 2, 2]);
        assert_eq!(cm.to_csv(), "true\\pred,1,2\n1,1,1\n2,0,1\n");
        assert!((cm.accuracy() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn bad_model_bytes() {
        assert!(matches!(TrainedModel::from_bytes(b"nope", None), Err(ModelError::Format(_))));
    }

    #[test]
    fn kind_names_parse() {
        for k in ModelKind::ALL {
            assert_eq!(ModelKind::parse(k.name()), Some(k));
        }
    }
}
