//! Adam optimisation of the combined loss, early stopping, and grid search
//! with k-fold cross-validation.

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{apply_artificial_censoring, kfold_split, stratified_holdout, SurvivalDataset};
use crate::distributions::{PrimitiveFamily, PrimitiveParams};
use crate::error::{DsmError, Result};
use crate::gradcore::{LayerSpec, ParamStore};
use crate::metrics::{evaluate_model, event_quantiles, EvalHorizons, MetricRow, DEFAULT_LEVELS};
use crate::model::{CombinedLoss, DsmModel, ModelConfig};
use crate::rng;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
/// Training sets up to this size are fitted full-batch.
pub const FULL_BATCH_LIMIT: usize = 4096;
pub const DEFAULT_BATCH_SIZE: usize = 1024;

/// Hyperparameters of a single training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub family: PrimitiveFamily,
    pub k: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    /// `None`: full batch up to [`FULL_BATCH_LIMIT`] rows, else
    /// [`DEFAULT_BATCH_SIZE`].
    pub batch_size: Option<usize>,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            family: PrimitiveFamily::Weibull,
            k: 4,
            alpha: 1.0,
            lambda: 1e-8,
            learning_rate: 1e-3,
            hidden: vec![50],
            max_epochs: 200,
            patience: 10,
            batch_size: None,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DsmError::InvalidArgument(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if self.max_epochs == 0 {
            return Err(DsmError::InvalidArgument("max_epochs must be >= 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(DsmError::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(DsmError::InvalidArgument(format!(
                "validation fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        self.model_config(1, 1).validate()
    }

    pub fn model_config(&self, input_dim: usize, risks: usize) -> ModelConfig {
        ModelConfig {
            family: self.family,
            k: self.k,
            risks,
            layers: LayerSpec::new(input_dim, self.hidden.clone()),
            alpha: self.alpha,
            lambda: self.lambda,
        }
    }

    /// Canonical one-line description; the hash is derived from it.
    pub fn canonical(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        format!(
            "family={};k={};alpha={:e};lambda={:e};learning_rate={:e};hidden={};max_epochs={};patience={};batch_size={};validation_fraction={:e};seed={}",
            self.family,
            self.k,
            self.alpha,
            self.lambda,
            self.learning_rate,
            hidden.join(","),
            self.max_epochs,
            self.patience,
            self.batch_size.map_or("auto".to_string(), |b| b.to_string()),
            self.validation_fraction,
            self.seed
        )
    }

    /// First 16 hex digits of the SHA-256 of [`TrainConfig::canonical`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        let mut out = String::with_capacity(16);
        for b in &digest[..8] {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    /// Learnable scalars of a model built from this config.
    pub fn parameter_count(&self, input_dim: usize, risks: usize) -> usize {
        let mut total = 0;
        let mut fan_in = input_dim;
        for &h in &self.hidden {
            total += fan_in * h + h;
            fan_in = h;
        }
        total + risks * (3 * fan_in * self.k + 2 * self.k)
    }
}

/// Lists of values; the grid is their Cartesian product.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub learning_rates: Vec<f64>,
    pub ks: Vec<usize>,
    pub alphas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub families: Vec<PrimitiveFamily>,
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
}

impl Default for GridSpec {
    /// The full published search grid.
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-3, 1e-4],
            ks: vec![4, 6, 8],
            alphas: vec![0.5, 0.75, 1.0],
            lambdas: vec![1e-8],
            families: vec![PrimitiveFamily::Weibull, PrimitiveFamily::LogNormal],
            depths: vec![1, 2],
            widths: vec![50, 100],
        }
    }
}

impl GridSpec {
    /// Every combination, applied on top of `base`, in a fixed nested order.
    pub fn expand(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &family in &self.families {
            for &depth in &self.depths {
                for &width in &self.widths {
                    for &k in &self.ks {
                        for &alpha in &self.alphas {
                            for &lambda in &self.lambdas {
                                for &learning_rate in &self.learning_rates {
                                    out.push(TrainConfig {
                                        family,
                                        k,
                                        alpha,
                                        lambda,
                                        learning_rate,
                                        hidden: vec![width; depth],
                                        ..base.clone()
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            first: vec![0.0; store.len()],
            second: vec![0.0; store.len()],
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        }
    }
}

/// One bias-corrected Adam update from the store's gradients, which are
/// then cleared. A non-finite gradient aborts without touching the values.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, learning_rate: f64) -> Result<()> {
    if state.first.len() != store.len() {
        return Err(DsmError::DimensionMismatch {
            context: "Adam moments".into(),
            expected: store.len(),
            actual: state.first.len(),
        });
    }
    if let Some(i) = store.grads().iter().position(|g| !g.is_finite()) {
        return Err(DsmError::NonFinite(format!(
            "gradient of `{}` (index {i}) is {}",
            store.name_of_index(i),
            store.grads()[i]
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let grads = store.grads().to_vec();
    let values = store.values_mut();
    for i in 0..values.len() {
        let g = grads[i];
        state.first[i] = b1 * state.first[i] + (1.0 - b1) * g;
        state.second[i] = b2 * state.second[i] + (1.0 - b2) * g * g;
        let m_hat = state.first[i] / bc1;
        let v_hat = state.second[i] / bc2;
        values[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
    }
    store.zero_grad();
    Ok(())
}

/// Loss values after one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss over the epoch, each evaluated before its update.
    pub train_loss: f64,
    /// Loss on the held-out rows after the epoch; the training loss when
    /// nothing is held out.
    pub validation_loss: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: DsmModel,
    pub trace: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub initial_train_loss: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Builds an initialised, untrained model for `data`: time scale from the
/// median training event time and per-risk anchors from a single-primitive
/// fit to the scaled event times.
pub fn initial_model(data: &SurvivalDataset, train_rows: &[usize], config: &TrainConfig) -> Result<DsmModel> {
    let mut event_times: Vec<f64> = train_rows
        .iter()
        .filter(|&&r| data.label(r) != 0)
        .map(|&r| data.time(r))
        .collect();
    event_times.sort_by(f64::total_cmp);
    for risk in 1..=data.n_risks() {
        if !train_rows.iter().any(|&r| data.label(r) == risk) {
            return Err(DsmError::NoEvents { risk });
        }
    }
    let scale = median(&event_times);
    let anchors = (1..=data.n_risks())
        .map(|risk| {
            let times: Vec<f64> = train_rows
                .iter()
                .filter(|&&r| data.label(r) == risk)
                .map(|&r| data.time(r) / scale)
                .collect();
            config.family.fit_mle(&times)
        })
        .collect::<Result<Vec<PrimitiveParams>>>()?;
    let mut model = DsmModel::new(
        config.model_config(data.n_features(), data.n_risks()),
        data.feature_names().to_vec(),
    )?;
    model.set_time_scale(scale)?;
    model.initialize(anchors, rng::derive_seed(config.seed, "init", 0))?;
    Ok(model)
}

/// Trains a model with Adam, early stopping on a stratified validation
/// holdout, and returns the best parameters with the loss trace.
pub fn fit(data: &SurvivalDataset, config: &TrainConfig) -> Result<FitResult> {
    config.validate()?;
    if data.is_empty() {
        return Err(DsmError::Empty("training data".into()));
    }
    let (mut train_rows, val_rows) = stratified_holdout(data.labels(), config.validation_fraction, config.seed);
    if train_rows.is_empty() {
        return Err(DsmError::Empty("no training rows after the validation holdout".into()));
    }
    let mut model = initial_model(data, &train_rows, config)?;
    let batch = match config.batch_size {
        Some(b) => b,
        None if train_rows.len() <= FULL_BATCH_LIMIT => train_rows.len(),
        None => DEFAULT_BATCH_SIZE,
    };
    let val_eval: &[usize] = if val_rows.is_empty() { &train_rows } else { &val_rows };
    let val_eval = val_eval.to_vec();

    let initial_train_loss = CombinedLoss::new(&model, data, &train_rows)?.value(model.store().values())?;
    let mut adam = AdamState::new(model.store());
    let mut grads = vec![0.0; model.parameter_count()];
    let mut trace = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.store().values().to_vec());
    let mut since_best = 0usize;
    for epoch in 1..=config.max_epochs {
        if batch < train_rows.len() {
            train_rows.shuffle(&mut rng::substream(config.seed, "batches", epoch as u64));
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for rows in train_rows.chunks(batch) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let loss = CombinedLoss::new(&model, data, rows)?.value_and_grad(model.store().values(), &mut grads)?;
            model.store_mut().grads_mut().copy_from_slice(&grads);
            adam_step(model.store_mut(), &mut adam, config.learning_rate)?;
            epoch_loss += loss;
            batches += 1;
        }
        let validation_loss = CombinedLoss::new(&model, data, &val_eval)?.value(model.store().values())?;
        trace.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / batches as f64,
            validation_loss,
        });
        if validation_loss < best.0 {
            best = (validation_loss, epoch, model.store().values().to_vec());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                log::debug!("early stop at epoch {epoch}, best {}", best.1);
                break;
            }
        }
    }
    model.store_mut().values_mut().copy_from_slice(&best.2);
    Ok(FitResult {
        model,
        trace,
        best_epoch: best.1,
        initial_train_loss,
    })
}

/// Metrics of one grid point on one validation fold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvRow {
    pub config_hash: String,
    pub fold: usize,
    #[serde(flatten)]
    pub metrics: MetricRow,
}

/// Mean and standard error of one metric across folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSe {
    pub mean: f64,
    pub standard_error: f64,
    pub folds: usize,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some(Self {
            mean,
            standard_error: (var / n).sqrt(),
            folds: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HorizonSummary {
    pub risk: usize,
    pub horizon_level: f64,
    pub horizon_time: f64,
    pub ctd: Option<MeanSe>,
    pub brier: Option<MeanSe>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigSummary {
    pub config_hash: String,
    pub config: TrainConfig,
    pub parameter_count: usize,
    /// Mean C^td over folds, risks and the selection levels.
    pub selection_score: Option<f64>,
    pub horizons: Vec<HorizonSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport {
    pub folds: usize,
    pub seed: u64,
    pub artificial_censoring: f64,
    pub horizons: Vec<EvalHorizons>,
    pub best: usize,
    pub configs: Vec<ConfigSummary>,
    #[serde(skip)]
    pub rows: Vec<CvRow>,
}

impl CvReport {
    pub fn best_config(&self) -> &ConfigSummary {
        &self.configs[self.best]
    }
}

/// Options for [`grid_search_cv`].
#[derive(Debug, Clone, PartialEq)]
pub struct CvOptions {
    pub folds: usize,
    pub seed: u64,
    /// Evaluation quantile levels; each must be in `(0, 1]`.
    pub levels: Vec<f64>,
    /// Levels averaged for model selection.
    pub selection_levels: Vec<f64>,
    /// Fraction of uncensored training rows to censor artificially;
    /// validation folds are never modified.
    pub artificial_censoring: f64,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            levels: vec![0.25, 0.5, 0.75, 1.0],
            selection_levels: DEFAULT_LEVELS.to_vec(),
            artificial_censoring: 0.0,
        }
    }
}

/// Fits every grid point on every fold and selects the point with the
/// highest mean validation C^td at the selection levels; ties go to the
/// smaller model, then to the earlier grid point.
///
/// Horizons are event-time quantiles of the full dataset, per risk. Folds
/// whose training part lacks events for some risk are skipped with a
/// warning.
pub fn grid_search_cv(data: &SurvivalDataset, grid: &[TrainConfig], options: &CvOptions) -> Result<CvReport> {
    if grid.is_empty() {
        return Err(DsmError::Empty("hyperparameter grid".into()));
    }
    for c in grid {
        c.validate()?;
    }
    if let Some(l) = options.selection_levels.iter().find(|l| !options.levels.contains(l)) {
        return Err(DsmError::InvalidArgument(format!("selection level {l} is not an evaluation level")));
    }
    let folds = kfold_split(data, options.folds, options.seed)?;
    let horizons = (1..=data.n_risks())
        .map(|risk| event_quantiles(data, risk, &options.levels))
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|c| (0..folds.len()).map(move |f| (c, f))).collect();
    let results: Vec<Result<Option<Vec<MetricRow>>>> = jobs
        .par_iter()
        .map(|&(c, f)| {
            let fold = &folds[f];
            let mut train = data.subset(&fold.train);
            if options.artificial_censoring > 0.0 {
                train = apply_artificial_censoring(
                    &train,
                    options.artificial_censoring,
                    rng::derive_seed(options.seed, "ablation", f as u64),
                )?;
            }
            let validation = data.subset(&fold.validation);
            let fitted = match fit(&train, &grid[c]) {
                Ok(r) => r,
                Err(DsmError::NoEvents { risk }) => {
                    log::warn!("fold {f}: no training events for risk {risk}, skipped");
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            log::info!(
                "config {} fold {f}: {} epochs, best {}",
                grid[c].hash(),
                fitted.trace.len(),
                fitted.best_epoch
            );
            evaluate_model(&fitted.model, &validation, &horizons).map(Some)
        })
        .collect();

    let mut rows = Vec::new();
    for (&(c, f), r) in jobs.iter().zip(results) {
        if let Some(metrics) = r? {
            let hash = grid[c].hash();
            rows.extend(metrics.into_iter().map(|m| CvRow {
                config_hash: hash.clone(),
                fold: f,
                metrics: m,
            }));
        }
    }

    let configs: Vec<ConfigSummary> = grid
        .iter()
        .map(|cfg| {
            let hash = cfg.hash();
            let mine: Vec<&CvRow> = rows.iter().filter(|r| r.config_hash == hash).collect();
            let mut selection = Vec::new();
            let mut summaries = Vec::new();
            for (m, h) in horizons.iter().enumerate() {
                for (&level, &time) in h.levels.iter().zip(&h.times) {
                    let at: Vec<&&CvRow> = mine
                        .iter()
                        .filter(|r| r.metrics.risk == m + 1 && r.metrics.horizon_level == level)
                        .collect();
                    let ctds: Vec<f64> = at.iter().filter_map(|r| r.metrics.ctd).collect();
                    let briers: Vec<f64> = at.iter().map(|r| r.metrics.brier).collect();
                    if options.selection_levels.contains(&level) {
                        selection.extend(&ctds);
                    }
                    summaries.push(HorizonSummary {
                        risk: m + 1,
                        horizon_level: level,
                        horizon_time: time,
                        ctd: MeanSe::of(&ctds),
                        brier: MeanSe::of(&briers),
                    });
                }
            }
            ConfigSummary {
                config_hash: hash,
                config: cfg.clone(),
                parameter_count: cfg.parameter_count(data.n_features(), data.n_risks()),
                selection_score: MeanSe::of(&selection).map(|s| s.mean),
                horizons: summaries,
            }
        })
        .collect();

    let best = (0..configs.len())
        .filter(|&i| configs[i].selection_score.is_some())
        .reduce(|a, b| {
            let (sa, sb) = (configs[a].selection_score.unwrap(), configs[b].selection_score.unwrap());
            if sb > sa || (sb == sa && configs[b].parameter_count < configs[a].parameter_count) {
                b
            } else {
                a
            }
        })
        .ok_or_else(|| DsmError::Empty("no grid point produced a validation C^td".into()))?;

    Ok(CvReport {
        folds: options.folds,
        seed: options.seed,
        artificial_censoring: options.artificial_censoring,
        horizons,
        best,
        configs,
        rows,
    })
}

/// Per-fold CSV: `config_hash,fold,risk,horizon_level,horizon_time,ctd,brier,n_pairs`.
pub fn write_cv_rows<W: Write>(rows: &[CvRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["config_hash", "fold", "risk", "horizon_level", "horizon_time", "ctd", "brier", "n_pairs"])?;
    for r in rows {
        let m = &r.metrics;
        out.write_record([
            r.config_hash.clone(),
            r.fold.to_string(),
            m.risk.to_string(),
            crate::metrics::level_field(m.horizon_level),
            m.horizon_time.to_string(),
            m.ctd.map(|c| c.to_string()).unwrap_or_default(),
            m.brier.to_string(),
            m.n_pairs.to_string(),
        ])?;
    }
    out.flush().map_err(|e| DsmError::io("<cv writer>", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_leaves_values() {
        let mut store = ParamStore::new();
        let id = store.add("w", 2, 1).unwrap();
        store.value_mut(id).copy_from_slice(&[1.0, -2.0]);
        let mut st = AdamState::new(&store);
        adam_step(&mut store, &mut st, 0.1).unwrap();
        assert_eq!(store.values(), &[1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.add("w", 3, 1).unwrap();
        store.grads_mut().copy_from_slice(&[0.5, -3.0, 1e-3]);
        let mut st = AdamState::new(&store);
        adam_step(&mut store, &mut st, 0.01).unwrap();
        for (v, sign) in store.values().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - sign * 0.01).abs() < 1e-7, "{v}");
        }
        assert!(store.grads().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn adam_rejects_nan_and_names_the_parameter() {
        let mut store = ParamStore::new();
        store.add("a", 1, 1).unwrap();
        store.add("bad", 2, 1).unwrap();
        store.grads_mut()[2] = f64::NAN;
        let before = store.values().to_vec();
        let mut st = AdamState::new(&store);
        let err = adam_step(&mut store, &mut st, 0.1).unwrap_err().to_string();
        assert!(err.contains("bad"), "{err}");
        assert_eq!(store.values(), before.as_slice());
    }

    #[test]
    fn grid_expansion_and_hash() {
        let points = GridSpec::default().expand(&TrainConfig::default());
        assert_eq!(points.len(), 2 * 3 * 3 * 2 * 2 * 2);
        let hashes: std::collections::BTreeSet<String> = points.iter().map(TrainConfig::hash).collect();
        assert_eq!(hashes.len(), points.len());
        assert_eq!(points[0].hash().len(), 16);
    }

    #[test]
    fn parameter_count_matches_a_built_model() {
        let cfg = TrainConfig {
            hidden: vec![7, 5],
            k: 3,
            ..TrainConfig::default()
        };
        let names: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let model = DsmModel::new(cfg.model_config(4, 2), names).unwrap();
        assert_eq!(cfg.parameter_count(4, 2), model.parameter_count());
    }
}
