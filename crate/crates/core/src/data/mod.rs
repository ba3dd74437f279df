//! Survival datasets: ingestion, imputation, synthetic generation, censoring
//! surgery and fold splitting.

mod csv_io;
mod impute;
mod split;
mod synthetic;

pub use csv_io::{load_csv, load_csv_raw, parse_csv_raw, write_csv, CsvOptions, RawColumn, RawTable};
pub use impute::{support_normal_values, Imputer};
pub use split::{kfold_split, stratified_holdout, transfer_split, Fold, TransferSplit};
pub use synthetic::{apply_artificial_censoring, generate_synthetic, GeneratorSpec};

use crate::error::{DsmError, Result};

/// Feature matrix (row-major) with one `(time, label)` outcome per row.
///
/// Label 0 is right-censored; label `m ≥ 1` is an observed event of risk `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalDataset {
    features: Vec<f64>,
    n_features: usize,
    times: Vec<f64>,
    labels: Vec<usize>,
    feature_names: Vec<String>,
    n_risks: usize,
}

impl SurvivalDataset {
    pub fn new(
        features: Vec<f64>,
        n_features: usize,
        times: Vec<f64>,
        labels: Vec<usize>,
        feature_names: Vec<String>,
        n_risks: usize,
    ) -> Result<Self> {
        let n = times.len();
        if labels.len() != n {
            return Err(DsmError::DimensionMismatch {
                context: "labels".into(),
                expected: n,
                actual: labels.len(),
            });
        }
        if features.len() != n * n_features {
            return Err(DsmError::DimensionMismatch {
                context: "feature matrix".into(),
                expected: n * n_features,
                actual: features.len(),
            });
        }
        if feature_names.len() != n_features {
            return Err(DsmError::DimensionMismatch {
                context: "feature names".into(),
                expected: n_features,
                actual: feature_names.len(),
            });
        }
        if n_risks == 0 {
            return Err(DsmError::InvalidArgument("a dataset needs at least one risk".into()));
        }
        if let Some(i) = times.iter().position(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(DsmError::Domain(format!("row {i}: time {} is not finite and positive", times[i])));
        }
        if let Some(i) = labels.iter().position(|&l| l > n_risks) {
            return Err(DsmError::Domain(format!("row {i}: label {} outside 0..={n_risks}", labels[i])));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(DsmError::NonFinite(format!(
                "feature `{}` at row {}",
                feature_names[i % n_features.max(1)],
                i / n_features.max(1)
            )));
        }
        Ok(Self {
            features,
            n_features,
            times,
            labels,
            feature_names,
            n_risks,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_risks(&self) -> usize {
        self.n_risks
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Rows with label `risk`.
    pub fn event_count(&self, risk: usize) -> usize {
        self.labels.iter().filter(|&&l| l == risk).count()
    }

    pub fn censored_count(&self) -> usize {
        self.event_count(0)
    }

    /// `true` where the row is an event of `risk`.
    pub fn event_flags(&self, risk: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l == risk).collect()
    }

    /// New dataset made of the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let mut features = Vec::with_capacity(rows.len() * self.n_features);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        Self {
            features,
            n_features: self.n_features,
            times: rows.iter().map(|&r| self.times[r]).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            feature_names: self.feature_names.clone(),
            n_risks: self.n_risks,
        }
    }

    /// Same rows with outcomes replaced.
    pub fn with_outcomes(&self, times: Vec<f64>, labels: Vec<usize>, n_risks: usize) -> Result<Self> {
        Self::new(
            self.features.clone(),
            self.n_features,
            times,
            labels,
            self.feature_names.clone(),
            n_risks,
        )
    }

    /// Same outcomes with a different feature matrix (e.g. learned embeddings).
    pub fn with_features(&self, features: Vec<f64>, n_features: usize, names: Vec<String>) -> Result<Self> {
        Self::new(features, n_features, self.times.clone(), self.labels.clone(), names, self.n_risks)
    }
}
