//! Linear Cox proportional-hazards model with a ridge penalty, fitted by
//! damped Newton iterations on the Breslow partial likelihood.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{kfold_split, SurvivalDataset};
use crate::error::{DsmError, Result};
use crate::metrics::harrell_c;

pub const DEFAULT_RIDGE: f64 = 1e-4;
pub const GRADIENT_TOLERANCE: f64 = 1e-6;
pub const MAX_NEWTON_ITERATIONS: usize = 100;
/// Two-sided 90% standard-normal quantile.
const Z_90: f64 = 1.644_853_626_951_472_2;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CphModel {
    /// Coefficients on the original (unstandardised) features.
    pub coefficients: Vec<f64>,
    pub ridge: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
}

/// Log relative hazard `coef · x`.
pub fn cph_risk(model: &CphModel, x: &[f64]) -> Result<f64> {
    if x.len() != model.coefficients.len() {
        return Err(DsmError::DimensionMismatch {
            context: "Cox features".into(),
            expected: model.coefficients.len(),
            actual: x.len(),
        });
    }
    Ok(model.coefficients.iter().zip(x).map(|(b, v)| b * v).sum())
}

/// Row order by descending time, grouped by equal time.
fn time_groups(times: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if times[g[0]] == times[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

struct Derivatives {
    value: f64,
    gradient: DVector<f64>,
    hessian: Option<DMatrix<f64>>,
}

/// Penalised negative log partial likelihood (Breslow ties) with gradient
/// and optionally Hessian. `x` is row-major `n × d`.
fn derivatives(x: &[f64], d: usize, groups: &[Vec<usize>], events: &[bool], beta: &[f64], ridge: f64, hessian: bool) -> Derivatives {
    let n = events.len();
    let eta: Vec<f64> = (0..n)
        .map(|i| x[i * d..(i + 1) * d].iter().zip(beta).map(|(a, b)| a * b).sum())
        .collect();
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s0 = 0.0;
    let mut s1 = vec![0.0; d];
    let mut s2 = if hessian { vec![0.0; d * d] } else { Vec::new() };
    let mut value = 0.0;
    let mut gradient = DVector::zeros(d);
    let mut h = if hessian { DMatrix::zeros(d, d) } else { DMatrix::zeros(0, 0) };
    for group in groups {
        for &i in group {
            let w = (eta[i] - shift).exp();
            let xi = &x[i * d..(i + 1) * d];
            s0 += w;
            for a in 0..d {
                s1[a] += w * xi[a];
                if hessian {
                    for b in 0..d {
                        s2[a * d + b] += w * xi[a] * xi[b];
                    }
                }
            }
        }
        for &i in group.iter().filter(|&&i| events[i]) {
            let xi = &x[i * d..(i + 1) * d];
            value += s0.ln() + shift - eta[i];
            for a in 0..d {
                let mean_a = s1[a] / s0;
                gradient[a] += mean_a - xi[a];
                if hessian {
                    for b in 0..d {
                        h[(a, b)] += s2[a * d + b] / s0 - mean_a * s1[b] / s0;
                    }
                }
            }
        }
    }
    for a in 0..d {
        value += 0.5 * ridge * beta[a] * beta[a];
        gradient[a] += ridge * beta[a];
        if hessian {
            h[(a, a)] += ridge;
        }
    }
    Derivatives {
        value,
        gradient,
        hessian: hessian.then_some(h),
    }
}

/// `-ln PL(β) + (ridge/2)‖β‖²` and its gradient, on the features as given.
pub fn cph_objective(features: &[f64], d: usize, times: &[f64], events: &[bool], beta: &[f64], ridge: f64) -> Result<(f64, Vec<f64>)> {
    check_inputs(features, d, times, events)?;
    if beta.len() != d {
        return Err(DsmError::DimensionMismatch {
            context: "Cox coefficients".into(),
            expected: d,
            actual: beta.len(),
        });
    }
    let r = derivatives(features, d, &time_groups(times), events, beta, ridge, false);
    Ok((r.value, r.gradient.iter().copied().collect()))
}

fn check_inputs(features: &[f64], d: usize, times: &[f64], events: &[bool]) -> Result<()> {
    if times.len() != events.len() || features.len() != times.len() * d {
        return Err(DsmError::DimensionMismatch {
            context: "Cox inputs".into(),
            expected: times.len() * d,
            actual: features.len(),
        });
    }
    if let Some(v) = features.iter().find(|v| !v.is_finite()) {
        return Err(DsmError::NonFinite(format!("Cox feature value {v}")));
    }
    Ok(())
}

/// Fits on raw arrays. Features are standardised internally; columns with
/// zero variance get a coefficient of exactly 0.
pub fn cph_fit_arrays(features: &[f64], d: usize, times: &[f64], events: &[bool], ridge: f64) -> Result<CphModel> {
    check_inputs(features, d, times, events)?;
    if !events.iter().any(|&e| e) {
        return Err(DsmError::NoEvents { risk: 1 });
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(DsmError::InvalidArgument(format!("ridge {ridge} must be >= 0")));
    }
    let n = times.len();
    let mut kept = Vec::new();
    let mut scale = Vec::new();
    let mut centre = Vec::new();
    for j in 0..d {
        let col = (0..n).map(|i| features[i * d + j]);
        let mean = col.clone().sum::<f64>() / n as f64;
        let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        if var > 0.0 {
            kept.push(j);
            centre.push(mean);
            scale.push(var.sqrt());
        }
    }
    let p = kept.len();
    let mut z = Vec::with_capacity(n * p);
    for i in 0..n {
        for (c, &j) in kept.iter().enumerate() {
            z.push((features[i * d + j] - centre[c]) / scale[c]);
        }
    }
    let groups = time_groups(times);
    let mut beta = vec![0.0; p];
    let mut current = derivatives(&z, p, &groups, events, &beta, ridge, true);
    let mut iterations = 0;
    loop {
        let norm = current.gradient.norm();
        if norm <= GRADIENT_TOLERANCE {
            break;
        }
        if iterations >= MAX_NEWTON_ITERATIONS {
            return Err(DsmError::NotConverged {
                iterations,
                gradient_norm: norm,
            });
        }
        iterations += 1;
        let mut h = current.hessian.take().expect("hessian requested");
        let mut jitter = 0.0;
        let step = loop {
            if let Some(chol) = h.clone().cholesky() {
                break chol.solve(&current.gradient);
            }
            // not positive definite (separable data without ridge)
            jitter = if jitter == 0.0 { 1e-8 } else { jitter * 10.0 };
            for a in 0..p {
                h[(a, a)] += jitter;
            }
            if jitter > 1e6 {
                return Err(DsmError::NotConverged {
                    iterations,
                    gradient_norm: norm,
                });
            }
        };
        let mut t = 1.0;
        let next = loop {
            let candidate: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b - t * s).collect();
            let r = derivatives(&z, p, &groups, events, &candidate, ridge, true);
            if r.value <= current.value || t < 1e-10 {
                break (candidate, r);
            }
            t *= 0.5;
        };
        if next.1.value > current.value {
            return Err(DsmError::NotConverged {
                iterations,
                gradient_norm: norm,
            });
        }
        beta = next.0;
        current = next.1;
    }
    let mut coefficients = vec![0.0; d];
    for (c, &j) in kept.iter().enumerate() {
        coefficients[j] = beta[c] / scale[c];
    }
    Ok(CphModel {
        coefficients,
        ridge,
        iterations,
        gradient_norm: current.gradient.norm(),
    })
}

/// Fits a single-risk dataset (label 1 is the event).
pub fn cph_fit(data: &SurvivalDataset, ridge: f64) -> Result<CphModel> {
    if data.n_risks() != 1 {
        return Err(DsmError::InvalidArgument(format!(
            "Cox fit needs a single-risk dataset, got {} risks",
            data.n_risks()
        )));
    }
    cph_fit_arrays(data.features(), data.n_features(), data.times(), &data.event_flags(1), ridge)
}

/// Harrell's C of a Cox model over held-out folds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferResult {
    pub mean: f64,
    pub standard_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub fold_values: Vec<f64>,
}

impl TransferResult {
    fn from_folds(fold_values: Vec<f64>) -> Result<Self> {
        if fold_values.is_empty() {
            return Err(DsmError::Empty("no fold produced a concordance".into()));
        }
        let k = fold_values.len() as f64;
        let mean = fold_values.iter().sum::<f64>() / k;
        let var = if fold_values.len() > 1 {
            fold_values.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (k - 1.0)
        } else {
            0.0
        };
        let standard_error = (var / k).sqrt();
        Ok(Self {
            mean,
            standard_error,
            ci_low: mean - Z_90 * standard_error,
            ci_high: mean + Z_90 * standard_error,
            fold_values,
        })
    }
}

/// Fits a Cox model on `features` (row-aligned with `outcomes`) in each
/// training fold and reports Harrell's C on the held-out folds, with a 90%
/// normal-approximation interval over folds.
pub fn transfer_eval(features: &[f64], d: usize, outcomes: &SurvivalDataset, folds: usize, seed: u64, ridge: f64) -> Result<TransferResult> {
    if outcomes.n_risks() != 1 {
        return Err(DsmError::InvalidArgument("transfer evaluation needs single-risk outcomes".into()));
    }
    check_inputs(features, d, outcomes.times(), &outcomes.event_flags(1))?;
    let events = outcomes.event_flags(1);
    let mut values = Vec::with_capacity(folds);
    for (f, fold) in kfold_split(outcomes, folds, seed)?.iter().enumerate() {
        let pick = |rows: &[usize]| -> (Vec<f64>, Vec<f64>, Vec<bool>) {
            let x = rows.iter().flat_map(|&i| features[i * d..(i + 1) * d].iter().copied()).collect();
            let t = rows.iter().map(|&i| outcomes.time(i)).collect();
            let e = rows.iter().map(|&i| events[i]).collect();
            (x, t, e)
        };
        let (xt, tt, et) = pick(&fold.train);
        if !et.iter().any(|&e| e) {
            log::warn!("transfer fold {f}: no training events, skipped");
            continue;
        }
        let model = cph_fit_arrays(&xt, d, &tt, &et, ridge)?;
        let (xv, tv, ev) = pick(&fold.validation);
        let scores = (0..tv.len())
            .map(|i| cph_risk(&model, &xv[i * d..(i + 1) * d]))
            .collect::<Result<Vec<_>>>()?;
        match harrell_c(&scores, &tv, &ev)?.value {
            Some(c) => values.push(c),
            None => log::warn!("transfer fold {f}: no comparable pairs, skipped"),
        }
    }
    TransferResult::from_folds(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_subject_likelihood_and_grid_oracle() {
        // events at t=1 (x=1) and t=2 (x=0); censored at t=3 (x=0.5)
        let x = [1.0, 0.0, 0.5];
        let t = [1.0, 2.0, 3.0];
        let e = [true, true, false];
        let theta = 0.7f64;
        let hand = (theta.exp() + 1.0 + (0.5 * theta).exp()).ln() - theta + (1.0 + (0.5 * theta).exp()).ln();
        let (v, _) = cph_objective(&x, 1, &t, &e, &[theta], 0.0).unwrap();
        assert!((v - hand).abs() < 1e-12, "{v} vs {hand}");

        let model = cph_fit_arrays(&x, 1, &t, &e, 0.0).unwrap();
        let mut best = (f64::INFINITY, 0.0);
        for step in 0..=2_000_000 {
            let b = -10.0 + step as f64 * 1e-5;
            let (v, _) = cph_objective(&x, 1, &t, &e, &[b], 0.0).unwrap();
            if v < best.0 {
                best = (v, b);
            }
        }
        assert!((model.coefficients[0] - best.1).abs() < 1e-4, "{} vs {}", model.coefficients[0], best.1);
    }

    #[test]
    fn zero_variance_feature_gets_zero_coefficient() {
        let x = [1.0, 5.0, 0.5, 5.0, 0.0, 5.0, -0.5, 5.0];
        let t = [1.0, 2.0, 3.0, 4.0];
        let e = [true, true, true, false];
        let m = cph_fit_arrays(&x, 2, &t, &e, DEFAULT_RIDGE).unwrap();
        assert_eq!(m.coefficients[1], 0.0);
        assert!(m.coefficients[0] > 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = [0.3, -1.0, 1.2, 0.4, -0.7, 0.9, 0.0, 0.1, 2.0, -0.3];
        let t = [1.0, 2.0, 2.0, 4.0, 5.0];
        let e = [true, false, true, true, false];
        let beta = [0.4, -0.2];
        let (_, g) = cph_objective(&x, 2, &t, &e, &beta, 0.1).unwrap();
        for a in 0..2 {
            let h = 1e-6;
            let mut up = beta;
            up[a] += h;
            let mut down = beta;
            down[a] -= h;
            let fd = (cph_objective(&x, 2, &t, &e, &up, 0.1).unwrap().0 - cph_objective(&x, 2, &t, &e, &down, 0.1).unwrap().0) / (2.0 * h);
            assert!((fd - g[a]).abs() <= 1e-6 * fd.abs().max(1.0), "{fd} vs {}", g[a]);
        }
    }

    #[test]
    fn risk_is_linear() {
        let m = CphModel {
            coefficients: vec![0.5, -2.0],
            ridge: 0.0,
            iterations: 0,
            gradient_norm: 0.0,
        };
        let (a, b) = (2.0, -3.0);
        let x1 = [1.0, 2.0];
        let x2 = [-0.5, 0.25];
        let combo = [a * x1[0] + b * x2[0], a * x1[1] + b * x2[1]];
        let lhs = cph_risk(&m, &combo).unwrap();
        let rhs = a * cph_risk(&m, &x1).unwrap() + b * cph_risk(&m, &x2).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
        assert!(cph_risk(&m, &[1.0]).is_err());
    }
}
