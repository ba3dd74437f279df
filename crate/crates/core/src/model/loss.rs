use rayon::prelude::*;

use super::{DsmModel, MixtureScratch};
use crate::data::SurvivalDataset;
use crate::error::{DsmError, Result};
use crate::gradcore::Differentiable;

/// Rows per parallel work unit. Partial sums are merged in chunk order, so
/// results do not depend on the thread count.
const CHUNK_ROWS: usize = 128;

/// Training objective over a set of rows:
///
/// ```text
/// Σ_m [ -mean_{label = m} ELBO_u  -  α · mean_{label ≠ m} ELBO_c  +  prior_m ]
/// ```
///
/// An empty mean contributes zero. Times are divided by the model's time
/// scale before evaluation.
pub struct CombinedLoss<'a> {
    model: &'a DsmModel,
    data: &'a SurvivalDataset,
    /// Rows that can contribute; censored rows are dropped when `α = 0`.
    rows: Vec<usize>,
    /// Per risk: weight on each uncensored ELBO term.
    coef_uncensored: Vec<f64>,
    /// Per risk: weight on each censored ELBO term.
    coef_censored: Vec<f64>,
}

struct Workspace {
    outputs: Vec<Vec<f64>>,
    d_repr: Vec<f64>,
    mix: MixtureScratch,
    /// Per component: (ln-likelihood, d/d log_shape, d/d log_scale).
    terms: Vec<(f64, f64, f64)>,
}

impl<'a> CombinedLoss<'a> {
    pub fn new(model: &'a DsmModel, data: &'a SurvivalDataset, rows: &[usize]) -> Result<Self> {
        if data.n_features() != model.input_dim() {
            return Err(DsmError::DimensionMismatch {
                context: "dataset features".into(),
                expected: model.input_dim(),
                actual: data.n_features(),
            });
        }
        if data.n_risks() > model.risks() {
            return Err(DsmError::InvalidArgument(format!(
                "dataset has {} risks but the model only {}",
                data.n_risks(),
                model.risks()
            )));
        }
        if rows.is_empty() {
            return Err(DsmError::Empty("combined loss over an empty batch".into()));
        }
        let risks = model.risks();
        let mut n_events = vec![0usize; risks];
        for &r in rows {
            if r >= data.len() {
                return Err(DsmError::InvalidArgument(format!("row {r} out of range")));
            }
            let label = data.label(r);
            if label > 0 {
                if !(data.time(r) > 0.0) {
                    return Err(DsmError::Domain(format!("row {r}: event at time {}", data.time(r))));
                }
                n_events[label - 1] += 1;
            }
        }
        let alpha = model.config().alpha;
        let n = rows.len();
        let coef_uncensored = n_events
            .iter()
            .map(|&c| if c > 0 { -1.0 / c as f64 } else { 0.0 })
            .collect();
        let coef_censored = n_events
            .iter()
            .map(|&c| if n - c > 0 { -alpha / (n - c) as f64 } else { 0.0 })
            .collect();
        let rows = if alpha == 0.0 {
            rows.iter().copied().filter(|&r| data.label(r) != 0).collect()
        } else {
            rows.to_vec()
        };
        Ok(Self {
            model,
            data,
            rows,
            coef_uncensored,
            coef_censored,
        })
    }

    fn workspace(&self) -> Workspace {
        Workspace {
            outputs: self.model.mlp().widths().into_iter().map(|w| vec![0.0; w]).collect(),
            d_repr: vec![0.0; self.model.representation_dim()],
            mix: MixtureScratch::new(self.model.k()),
            terms: Vec::with_capacity(self.model.k()),
        }
    }

    /// Loss value only.
    pub fn value(&self, values: &[f64]) -> Result<f64> {
        self.evaluate(values, None)
    }

    /// Loss value, adding its gradient into `grads`.
    pub fn value_and_grad(&self, values: &[f64], grads: &mut [f64]) -> Result<f64> {
        self.evaluate(values, Some(grads))
    }

    fn evaluate(&self, values: &[f64], grads: Option<&mut [f64]>) -> Result<f64> {
        let want_grad = grads.is_some();
        let partials: Vec<Result<(f64, Vec<f64>)>> = self
            .rows
            .par_chunks(CHUNK_ROWS)
            .map(|chunk| {
                let mut ws = self.workspace();
                let mut local = if want_grad { vec![0.0; values.len()] } else { Vec::new() };
                let mut total = 0.0;
                for &r in chunk {
                    let g = if want_grad { Some(local.as_mut_slice()) } else { None };
                    total += self.row(values, r, &mut ws, g)?;
                }
                Ok((total, local))
            })
            .collect();

        let mut loss = 0.0;
        match grads {
            Some(grads) => {
                for p in partials {
                    let (v, g) = p?;
                    loss += v;
                    for (a, b) in grads.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                self.add_prior(values, Some(grads), &mut loss);
            }
            None => {
                for p in partials {
                    loss += p?.0;
                }
                self.add_prior(values, None, &mut loss);
            }
        }
        if !loss.is_finite() {
            return Err(DsmError::NonFinite(format!("combined loss evaluated to {loss}")));
        }
        Ok(loss)
    }

    fn add_prior(&self, values: &[f64], mut grads: Option<&mut [f64]>, loss: &mut f64) {
        let lambda = self.model.config().lambda;
        if lambda == 0.0 {
            return;
        }
        for (m, (head, anchor)) in self.model.heads().iter().zip(self.model.anchors()).enumerate() {
            *loss += self.model.prior_loss_values(values, m);
            if let Some(g) = grads.as_deref_mut() {
                for c in 0..self.model.k() {
                    g[head.log_scale_base + c] += 2.0 * lambda * (values[head.log_scale_base + c] - anchor.log_scale);
                    g[head.log_shape_base + c] += 2.0 * lambda * (values[head.log_shape_base + c] - anchor.log_shape);
                }
            }
        }
    }

    /// Contribution of one row, summed over risks.
    fn row(&self, values: &[f64], r: usize, ws: &mut Workspace, mut grads: Option<&mut [f64]>) -> Result<f64> {
        let model = self.model;
        let x = self.data.row(r);
        let t = self.data.time(r) / model.time_scale();
        let label = self.data.label(r);
        model.mlp().forward_into(values, x, &mut ws.outputs)?;
        let repr = ws.outputs.last().expect("at least one layer");
        let h = repr.len();
        let k = model.k();
        let family = model.family();
        let act = family.activation();
        let mut any_grad = false;
        ws.d_repr.iter_mut().for_each(|d| *d = 0.0);
        let mut total = 0.0;

        for (m, head) in model.heads().iter().enumerate() {
            let uncensored = label == m + 1;
            let coef = if uncensored {
                self.coef_uncensored[m]
            } else {
                self.coef_censored[m]
            };
            if coef == 0.0 {
                continue;
            }
            model.scaled_mixture(values, m, repr, &mut ws.mix);
            let mix = &ws.mix;
            // per-component log-likelihood and its parameter gradient
            let mut elbo = 0.0;
            let terms = &mut ws.terms;
            terms.clear();
            for c in 0..k {
                let vg = if uncensored {
                    family.log_pdf_grad_unchecked(mix.params[c], t)
                } else {
                    family.log_survival_grad_unchecked(mix.params[c], t)
                };
                elbo += mix.weights[c] * vg.value;
                terms.push((vg.value, vg.d_shape, vg.d_scale));
            }
            total += coef * elbo;

            let Some(g) = grads.as_deref_mut() else {
                continue;
            };
            any_grad = true;
            for c in 0..k {
                let (value, d_shape, d_scale) = terms[c];
                let w = mix.weights[c];
                // softmax backward: ∂/∂logit_c = w_c (ℓ_c - Σ_j w_j ℓ_j)
                let d_logit = coef * w * (value - elbo);
                let d_shape_base = coef * w * d_shape;
                let d_scale_base = coef * w * d_scale;
                let d_shape_pre = d_shape_base * act.scalar_derivative(mix.shape_pre[c]);
                let d_scale_pre = d_scale_base * act.scalar_derivative(mix.scale_pre[c]);
                g[head.log_shape_base + c] += d_shape_base;
                g[head.log_scale_base + c] += d_scale_base;
                for (off, d) in [
                    (head.gate, d_logit),
                    (head.shape_head, d_shape_pre),
                    (head.scale_head, d_scale_pre),
                ] {
                    if d == 0.0 {
                        continue;
                    }
                    let row = off + c * h;
                    for j in 0..h {
                        g[row + j] += d * repr[j];
                        ws.d_repr[j] += d * values[row + j];
                    }
                }
            }
        }

        if any_grad {
            if let Some(g) = grads {
                model.mlp().backward(values, x, &ws.outputs, &mut ws.d_repr, g);
                // backward consumes d_repr; restore its width for the next row
                ws.d_repr.resize(h, 0.0);
            }
        }
        Ok(total)
    }
}

impl Differentiable for CombinedLoss<'_> {
    type Tape = ();

    fn forward(&self, values: &[f64]) -> Result<(f64, ())> {
        Ok((self.value(values)?, ()))
    }

    fn backward(&self, values: &[f64], _: &(), grads: &mut [f64]) -> Result<()> {
        self.value_and_grad(values, grads).map(|_| ())
    }
}
