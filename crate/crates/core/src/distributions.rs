//! Weibull and Log-Normal primitives.
//!
//! Parameters live in log space so that gradient steps cannot leave the
//! valid region:
//!
//! | family    | `log_shape`     | `log_scale` |
//! |-----------|-----------------|-------------|
//! | Weibull   | ln η (shape)    | ln β        |
//! | LogNormal | η (location μ)  | ln β (= ln σ) |
//!
//! Weibull: `f(t) = η/β (t/β)^(η-1) exp(-(t/β)^η)`, `S(t) = exp(-(t/β)^η)`.
//! Log-Normal: `f(t) = 1/(tβ√(2π)) exp(-(ln t - η)²/(2β²))`,
//! `S(t) = ½ erfc((ln t - η)/(√2 β))`.

use std::fmt;
use std::str::FromStr;

use crate::error::{DsmError, Result};
use crate::gradcore::ActivationKind;

const LN_2PI_HALF: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrimitiveFamily {
    Weibull,
    LogNormal,
}

impl PrimitiveFamily {
    /// Activation applied to the head outputs before they shift the base
    /// parameters.
    pub fn activation(self) -> ActivationKind {
        match self {
            PrimitiveFamily::Weibull => ActivationKind::Selu,
            PrimitiveFamily::LogNormal => ActivationKind::Tanh,
        }
    }
}

impl fmt::Display for PrimitiveFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrimitiveFamily::Weibull => "weibull",
            PrimitiveFamily::LogNormal => "lognormal",
        })
    }
}

impl serde::Serialize for PrimitiveFamily {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl FromStr for PrimitiveFamily {
    type Err = DsmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "weibull" => Ok(PrimitiveFamily::Weibull),
            "lognormal" | "log-normal" | "log_normal" => Ok(PrimitiveFamily::LogNormal),
            other => Err(DsmError::InvalidArgument(format!("unknown primitive family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimitiveParams {
    pub log_shape: f64,
    pub log_scale: f64,
}

impl PrimitiveParams {
    pub fn new(log_shape: f64, log_scale: f64) -> Self {
        Self { log_shape, log_scale }
    }

    /// Weibull parameters from natural-scale shape η and scale β.
    pub fn weibull(shape: f64, scale: f64) -> Self {
        Self::new(shape.ln(), scale.ln())
    }

    /// Log-Normal parameters from location η and scale β.
    pub fn lognormal(location: f64, scale: f64) -> Self {
        Self::new(location, scale.ln())
    }
}

/// Value and gradient with respect to (`log_shape`, `log_scale`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueGrad {
    pub value: f64,
    pub d_shape: f64,
    pub d_scale: f64,
}

// Chebyshev-fitted erfc (fractional error < 1.2e-7). The constant term is
// shifted by -3e-8 from the published fit so that erfc(0) = 1 exactly and the
// z < 0 reflection joins continuously.
const ERFC_COEFFS: [f64; 10] = [
    -1.265_512_26,
    1.000_023_68,
    0.374_091_96,
    0.096_784_18,
    -0.186_288_06,
    0.278_868_07,
    -1.135_203_98,
    1.488_515_87,
    -0.822_152_23,
    0.170_872_77,
];

/// ln erfc(z) and its derivative for z ≥ 0, written as
/// `ln t - z² + P(t)` with `t = 1/(1 + z/2)`; finite for every finite z.
fn log_erfc_nonneg(z: f64) -> (f64, f64) {
    let t = 1.0 / (1.0 + 0.5 * z);
    let mut p = 0.0;
    let mut dp = 0.0;
    for &c in ERFC_COEFFS.iter().rev() {
        dp = dp * t + p;
        p = p * t + c;
    }
    let value = t.ln() - z * z + p;
    let deriv = -0.5 * t - 2.0 * z - 0.5 * t * t * dp;
    (value, deriv)
}

/// ln erfc(z) and d/dz ln erfc(z).
pub fn log_erfc(z: f64) -> (f64, f64) {
    if z >= 0.0 {
        log_erfc_nonneg(z)
    } else {
        // erfc(z) = 2 - erfc(-z)
        let (lu, dlu) = log_erfc_nonneg(-z);
        let e = lu.exp();
        let value = (2.0 - e).ln();
        let deriv = e * dlu / (2.0 - e);
        (value, deriv)
    }
}

pub fn erfc(z: f64) -> f64 {
    log_erfc(z).0.exp()
}

fn check_positive_time(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(DsmError::Domain(format!("density requires a finite time > 0, got {t}")))
    }
}

fn check_nonnegative_time(t: f64) -> Result<()> {
    if t >= 0.0 && !t.is_nan() {
        Ok(())
    } else {
        Err(DsmError::Domain(format!("survival requires time >= 0, got {t}")))
    }
}

impl PrimitiveFamily {
    pub fn log_pdf(self, p: PrimitiveParams, t: f64) -> Result<f64> {
        check_positive_time(t)?;
        Ok(self.log_pdf_grad_unchecked(p, t).value)
    }

    pub fn log_survival(self, p: PrimitiveParams, t: f64) -> Result<f64> {
        check_nonnegative_time(t)?;
        Ok(self.log_survival_grad_unchecked(p, t).value)
    }

    pub fn grad_log_pdf(self, p: PrimitiveParams, t: f64) -> Result<(f64, f64)> {
        check_positive_time(t)?;
        let g = self.log_pdf_grad_unchecked(p, t);
        Ok((g.d_shape, g.d_scale))
    }

    pub fn grad_log_survival(self, p: PrimitiveParams, t: f64) -> Result<(f64, f64)> {
        check_nonnegative_time(t)?;
        let g = self.log_survival_grad_unchecked(p, t);
        Ok((g.d_shape, g.d_scale))
    }

    pub fn survival(self, p: PrimitiveParams, t: f64) -> Result<f64> {
        self.log_survival(p, t).map(f64::exp)
    }

    /// ln f(t) with gradient; caller guarantees `t > 0`.
    #[inline]
    pub fn log_pdf_grad_unchecked(self, p: PrimitiveParams, t: f64) -> ValueGrad {
        let ln_t = t.ln();
        match self {
            PrimitiveFamily::Weibull => {
                let eta = p.log_shape.exp();
                let r = ln_t - p.log_scale;
                let z = (eta * r).exp();
                ValueGrad {
                    value: p.log_shape - p.log_scale + (eta - 1.0) * r - z,
                    d_shape: 1.0 + eta * r * (1.0 - z),
                    d_scale: -eta + eta * z,
                }
            }
            PrimitiveFamily::LogNormal => {
                let sigma = p.log_scale.exp();
                let y = (ln_t - p.log_shape) / sigma;
                ValueGrad {
                    value: -ln_t - p.log_scale - LN_2PI_HALF - 0.5 * y * y,
                    d_shape: y / sigma,
                    d_scale: -1.0 + y * y,
                }
            }
        }
    }

    /// ln S(t) with gradient; caller guarantees `t >= 0`.
    #[inline]
    pub fn log_survival_grad_unchecked(self, p: PrimitiveParams, t: f64) -> ValueGrad {
        if t == 0.0 {
            return ValueGrad {
                value: 0.0,
                d_shape: 0.0,
                d_scale: 0.0,
            };
        }
        let ln_t = t.ln();
        match self {
            PrimitiveFamily::Weibull => {
                let eta = p.log_shape.exp();
                let r = ln_t - p.log_scale;
                let z = (eta * r).exp();
                ValueGrad {
                    value: -z,
                    d_shape: -eta * r * z,
                    d_scale: eta * z,
                }
            }
            PrimitiveFamily::LogNormal => {
                let sigma = p.log_scale.exp();
                let y = (ln_t - p.log_shape) / sigma;
                let (le, dle) = log_erfc(y * std::f64::consts::FRAC_1_SQRT_2);
                let dy = dle * std::f64::consts::FRAC_1_SQRT_2;
                ValueGrad {
                    value: le - std::f64::consts::LN_2,
                    d_shape: -dy / sigma,
                    d_scale: -dy * y,
                }
            }
        }
    }

    /// Maximum-likelihood fit of a single primitive to exact event times.
    ///
    /// Falls back to shape 1 (Weibull) or unit scale (Log-Normal) when the
    /// sample has fewer than two distinct values.
    pub fn fit_mle(self, times: &[f64]) -> Result<PrimitiveParams> {
        if times.is_empty() {
            return Err(DsmError::Empty("no event times to fit".into()));
        }
        if let Some(&bad) = times.iter().find(|&&t| !(t > 0.0 && t.is_finite())) {
            return Err(DsmError::Domain(format!("event time {bad} is not positive")));
        }
        let n = times.len() as f64;
        let logs: Vec<f64> = times.iter().map(|t| t.ln()).collect();
        let mean_log = logs.iter().sum::<f64>() / n;
        let distinct = logs.iter().any(|&l| l != logs[0]);
        match self {
            PrimitiveFamily::LogNormal => {
                let var = logs.iter().map(|l| (l - mean_log).powi(2)).sum::<f64>() / n;
                let sigma = if distinct && var > 0.0 { var.sqrt() } else { 1.0 };
                Ok(PrimitiveParams::lognormal(mean_log, sigma))
            }
            PrimitiveFamily::Weibull => {
                if !distinct {
                    return Ok(PrimitiveParams::new(0.0, mean_log));
                }
                // Profile score in η: 1/η + mean(ln t) - Σ t^η ln t / Σ t^η,
                // strictly decreasing; solved by bisection on ln η.
                let score = |log_eta: f64| {
                    let eta = log_eta.exp();
                    let max = logs.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(eta * l));
                    let (mut num, mut den) = (0.0, 0.0);
                    for &l in &logs {
                        let w = (eta * l - max).exp();
                        num += w * l;
                        den += w;
                    }
                    1.0 / eta + mean_log - num / den
                };
                let (mut lo, mut hi) = (-10.0f64, 10.0f64);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if score(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo < 1e-14 {
                        break;
                    }
                }
                let log_eta = 0.5 * (lo + hi);
                let eta = log_eta.exp();
                let max = logs.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(eta * l));
                let lse = max + logs.iter().map(|&l| (eta * l - max).exp()).sum::<f64>().ln();
                let log_scale = (lse - n.ln()) / eta;
                Ok(PrimitiveParams::new(log_eta, log_scale))
            }
        }
    }
}
