//! The mixture model: a shared representation network feeding one head per
//! risk, each head producing per-subject gating weights and K primitive
//! parameter pairs.
//!
//! For subject `x`, risk `m`, component `k`, with representation `φ = Φ(x)`:
//!
//! ```text
//! weights   = softmax(gate_m · φ)
//! log_scale = log_scale_base_mk + act(scale_head_mk · φ)
//! log_shape = log_shape_base_mk + act(shape_head_mk · φ)
//! ```
//!
//! with `act` = SELU for Weibull and tanh for Log-Normal. The additive shift
//! is applied to the log-space parameters so positivity always holds.

mod io;
mod loss;

pub use io::{parse_model, read_model, save_model, write_model};
pub use loss::CombinedLoss;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::SurvivalDataset;
use crate::distributions::{PrimitiveFamily, PrimitiveParams};
use crate::error::{DsmError, Result};
use crate::gradcore::{softmax_into, LayerSpec, Mlp, ParamStore};
use crate::rng;

/// Standard deviation of the jitter applied to base parameters at
/// initialisation.
pub const INIT_JITTER: f64 = 0.1;

/// Architecture and loss hyperparameters of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub family: PrimitiveFamily,
    /// Mixture components per risk.
    pub k: usize,
    /// Number of competing risks `M`.
    pub risks: usize,
    pub layers: LayerSpec,
    /// Discount on the censored-likelihood term, in `[0, 1]`.
    pub alpha: f64,
    /// Prior strength.
    pub lambda: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(DsmError::InvalidArgument("mixture size K must be >= 1".into()));
        }
        if self.risks == 0 {
            return Err(DsmError::InvalidArgument("at least one risk is required".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DsmError::InvalidArgument(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(DsmError::InvalidArgument(format!("lambda {} must be >= 0", self.lambda)));
        }
        Ok(())
    }
}

/// Offsets of one risk head's arrays inside the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct RiskHead {
    pub gate: usize,
    pub scale_head: usize,
    pub shape_head: usize,
    pub log_scale_base: usize,
    pub log_shape_base: usize,
}

fn head_name(risk: usize, part: &str) -> String {
    format!("risk{risk}.{part}")
}

/// Per-subject mixture for one risk, in the model's original time units.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMixture {
    pub family: PrimitiveFamily,
    pub weights: Vec<f64>,
    pub components: Vec<PrimitiveParams>,
}

fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl InstanceMixture {
    /// Jensen lower bound `Σ_k w_k ln f_k(t)` on the log mixture density.
    pub fn elbo_uncensored(&self, t: f64) -> Result<f64> {
        let mut total = 0.0;
        for (w, p) in self.weights.iter().zip(&self.components) {
            total += w * self.family.log_pdf(*p, t)?;
        }
        Ok(total)
    }

    /// Jensen lower bound `Σ_k w_k ln S_k(t)` on the log mixture survival.
    pub fn elbo_censored(&self, t: f64) -> Result<f64> {
        let mut total = 0.0;
        for (w, p) in self.weights.iter().zip(&self.components) {
            total += w * self.family.log_survival(*p, t)?;
        }
        Ok(total)
    }

    /// Exact `ln Σ_k w_k f_k(t)`.
    pub fn log_density(&self, t: f64) -> Result<f64> {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, p)| Ok(w.ln() + self.family.log_pdf(*p, t)?))
            .collect::<Result<_>>()?;
        Ok(log_sum_exp(terms.iter().copied()))
    }

    /// Exact `ln Σ_k w_k S_k(t)`.
    pub fn log_survival(&self, t: f64) -> Result<f64> {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, p)| Ok(w.ln() + self.family.log_survival(*p, t)?))
            .collect::<Result<_>>()?;
        Ok(log_sum_exp(terms.iter().copied()))
    }

    pub fn survival(&self, t: f64) -> Result<f64> {
        let mut s = 0.0;
        for (w, p) in self.weights.iter().zip(&self.components) {
            s += w * self.family.log_survival(*p, t)?.exp();
        }
        Ok(s.clamp(0.0, 1.0))
    }
}

/// Shift that converts parameters fitted on `t / time_scale` back to `t`.
fn rescale(family: PrimitiveFamily, p: PrimitiveParams, ln_scale: f64) -> PrimitiveParams {
    match family {
        PrimitiveFamily::Weibull => PrimitiveParams::new(p.log_shape, p.log_scale + ln_scale),
        PrimitiveFamily::LogNormal => PrimitiveParams::new(p.log_shape + ln_scale, p.log_scale),
    }
}

/// A deep survival machine.
#[derive(Debug, Clone, PartialEq)]
pub struct DsmModel {
    config: ModelConfig,
    store: ParamStore,
    mlp: Mlp,
    heads: Vec<RiskHead>,
    /// Prior anchors per risk, in scaled time units.
    anchors: Vec<PrimitiveParams>,
    /// Times are divided by this before entering the likelihood.
    time_scale: f64,
    feature_names: Vec<String>,
}

impl DsmModel {
    /// All parameters zero, anchors at the origin, unit time scale.
    pub fn new(config: ModelConfig, feature_names: Vec<String>) -> Result<Self> {
        config.validate()?;
        if feature_names.len() != config.layers.input_dim {
            return Err(DsmError::DimensionMismatch {
                context: "feature names".into(),
                expected: config.layers.input_dim,
                actual: feature_names.len(),
            });
        }
        let mut store = ParamStore::new();
        let mlp = Mlp::register(&mut store, "mlp", &config.layers)?;
        let h = mlp.output_dim();
        let mut heads = Vec::with_capacity(config.risks);
        for m in 1..=config.risks {
            let gate = store.add(head_name(m, "gate"), config.k, h)?;
            let scale_head = store.add(head_name(m, "scale_head"), config.k, h)?;
            let shape_head = store.add(head_name(m, "shape_head"), config.k, h)?;
            let log_scale_base = store.add(head_name(m, "log_scale_base"), config.k, 1)?;
            let log_shape_base = store.add(head_name(m, "log_shape_base"), config.k, 1)?;
            heads.push(RiskHead {
                gate: store.offset(gate),
                scale_head: store.offset(scale_head),
                shape_head: store.offset(shape_head),
                log_scale_base: store.offset(log_scale_base),
                log_shape_base: store.offset(log_shape_base),
            });
        }
        Ok(Self {
            anchors: vec![PrimitiveParams::new(0.0, 0.0); config.risks],
            config,
            store,
            mlp,
            heads,
            time_scale: 1.0,
            feature_names,
        })
    }

    /// Random initialisation: Glorot-uniform weights, zero biases, base
    /// parameters at the anchors plus `N(0, 0.1²)` jitter.
    pub fn initialize(&mut self, anchors: Vec<PrimitiveParams>, seed: u64) -> Result<()> {
        if anchors.len() != self.config.risks {
            return Err(DsmError::DimensionMismatch {
                context: "prior anchors".into(),
                expected: self.config.risks,
                actual: anchors.len(),
            });
        }
        self.anchors = anchors;
        let mut r = rng::stream(seed, "init/mlp");
        self.mlp.init(&mut self.store, &mut r);
        let mut r = rng::stream(seed, "init/heads");
        let h = self.representation_dim();
        let k = self.config.k;
        let limit = (6.0 / (h + k) as f64).sqrt();
        let jitter = Normal::new(0.0, INIT_JITTER).expect("valid normal");
        let mut jr = rng::stream(seed, "init/jitter");
        let values = self.store.values_mut();
        for (head, anchor) in self.heads.iter().zip(&self.anchors) {
            for off in [head.gate, head.scale_head, head.shape_head] {
                for v in &mut values[off..off + k * h] {
                    *v = r.gen_range(-limit..=limit);
                }
            }
            for c in 0..k {
                values[head.log_scale_base + c] = anchor.log_scale + jitter.sample(&mut jr);
                values[head.log_shape_base + c] = anchor.log_shape + jitter.sample(&mut jr);
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn family(&self) -> PrimitiveFamily {
        self.config.family
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn risks(&self) -> usize {
        self.config.risks
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn representation_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub(crate) fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub(crate) fn heads(&self) -> &[RiskHead] {
        &self.heads
    }

    pub fn anchors(&self) -> &[PrimitiveParams] {
        &self.anchors
    }

    pub fn set_anchors(&mut self, anchors: Vec<PrimitiveParams>) -> Result<()> {
        if anchors.len() != self.config.risks {
            return Err(DsmError::DimensionMismatch {
                context: "prior anchors".into(),
                expected: self.config.risks,
                actual: anchors.len(),
            });
        }
        self.anchors = anchors;
        Ok(())
    }

    pub fn time_scale(&self) -> f64 {
        self.time_scale
    }

    pub fn set_time_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(DsmError::InvalidArgument(format!("time scale {scale} must be positive")));
        }
        self.time_scale = scale;
        Ok(())
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        let cfg = ModelConfig {
            alpha,
            ..self.config.clone()
        };
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        let cfg = ModelConfig {
            lambda,
            ..self.config.clone()
        };
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    /// Number of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        self.store.len()
    }

    fn check_risk(&self, risk: usize) -> Result<()> {
        if risk == 0 || risk > self.config.risks {
            return Err(DsmError::InvalidArgument(format!(
                "risk {risk} outside 1..={}",
                self.config.risks
            )));
        }
        Ok(())
    }

    /// Output of the final hidden layer.
    pub fn extract_representation(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.mlp.forward(self.store.values(), x)
    }

    /// Representation of every row, row-major (`n × representation_dim`).
    pub fn extract_representations(&self, data: &SurvivalDataset) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(data.len() * self.representation_dim());
        for i in 0..data.len() {
            out.extend(self.extract_representation(data.row(i))?);
        }
        Ok(out)
    }

    /// Mixture in scaled time units, from a precomputed representation.
    pub(crate) fn scaled_mixture(&self, values: &[f64], risk_index: usize, repr: &[f64], out: &mut MixtureScratch) {
        let head = &self.heads[risk_index];
        let h = repr.len();
        let act = self.config.family.activation();
        let dot = |off: usize, c: usize| -> f64 {
            values[off + c * h..off + (c + 1) * h]
                .iter()
                .zip(repr)
                .map(|(a, b)| a * b)
                .sum()
        };
        for c in 0..self.config.k {
            out.logits[c] = dot(head.gate, c);
            out.scale_pre[c] = dot(head.scale_head, c);
            out.shape_pre[c] = dot(head.shape_head, c);
            out.params[c] = PrimitiveParams::new(
                values[head.log_shape_base + c] + act.scalar(out.shape_pre[c]),
                values[head.log_scale_base + c] + act.scalar(out.scale_pre[c]),
            );
        }
        softmax_into(&out.logits, &mut out.weights);
    }

    /// Gating weights and component parameters for one subject and risk
    /// (`risk` is 1-based), in original time units.
    pub fn instance_mixture(&self, risk: usize, x: &[f64]) -> Result<InstanceMixture> {
        self.check_risk(risk)?;
        let repr = self.extract_representation(x)?;
        Ok(self.mixture_from_representation(risk - 1, &repr))
    }

    fn mixture_from_representation(&self, risk_index: usize, repr: &[f64]) -> InstanceMixture {
        let mut s = MixtureScratch::new(self.config.k);
        self.scaled_mixture(self.store.values(), risk_index, repr, &mut s);
        let ln_scale = self.time_scale.ln();
        InstanceMixture {
            family: self.config.family,
            weights: s.weights,
            components: s
                .params
                .into_iter()
                .map(|p| rescale(self.config.family, p, ln_scale))
                .collect(),
        }
    }

    /// `S_m(t | x)`.
    pub fn predict_survival(&self, risk: usize, x: &[f64], t: f64) -> Result<f64> {
        self.instance_mixture(risk, x)?.survival(t)
    }

    /// `1 - S_m(t | x)`, the per-risk estimated distribution function.
    pub fn predict_cif(&self, risk: usize, x: &[f64], t: f64) -> Result<f64> {
        Ok(1.0 - self.predict_survival(risk, x, t)?)
    }

    /// Survival for every row at each time; `out[i][j] = S(times[j] | row i)`.
    pub fn predict_survival_curves(&self, risk: usize, data: &SurvivalDataset, times: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_risk(risk)?;
        (0..data.len())
            .map(|i| {
                let repr = self.extract_representation(data.row(i))?;
                let mix = self.mixture_from_representation(risk - 1, &repr);
                times.iter().map(|&t| mix.survival(t)).collect()
            })
            .collect()
    }

    /// `λ Σ_k (log_scale_base_k - anchor_scale)² + (log_shape_base_k - anchor_shape)²`.
    pub fn prior_loss(&self, risk: usize) -> Result<f64> {
        self.check_risk(risk)?;
        Ok(self.prior_loss_values(self.store.values(), risk - 1))
    }

    pub(crate) fn prior_loss_values(&self, values: &[f64], risk_index: usize) -> f64 {
        if self.config.lambda == 0.0 {
            return 0.0;
        }
        let head = &self.heads[risk_index];
        let anchor = self.anchors[risk_index];
        let mut total = 0.0;
        for c in 0..self.config.k {
            total += (values[head.log_scale_base + c] - anchor.log_scale).powi(2);
            total += (values[head.log_shape_base + c] - anchor.log_shape).powi(2);
        }
        self.config.lambda * total
    }

    /// Combined training objective over every row of `data`, in scaled
    /// time units.
    pub fn combined_loss(&self, data: &SurvivalDataset) -> Result<f64> {
        let rows: Vec<usize> = (0..data.len()).collect();
        CombinedLoss::new(self, data, &rows)?.value(self.store.values())
    }
}

/// Reusable buffers for one mixture evaluation.
#[derive(Debug, Clone)]
pub(crate) struct MixtureScratch {
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
    pub scale_pre: Vec<f64>,
    pub shape_pre: Vec<f64>,
    pub params: Vec<PrimitiveParams>,
}

impl MixtureScratch {
    pub fn new(k: usize) -> Self {
        Self {
            logits: vec![0.0; k],
            weights: vec![0.0; k],
            scale_pre: vec![0.0; k],
            shape_pre: vec![0.0; k],
            params: vec![PrimitiveParams::new(0.0, 0.0); k],
        }
    }
}

#[cfg(test)]
mod tests;
