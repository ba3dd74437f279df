use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use super::SurvivalDataset;
use crate::error::{DsmError, Result};
use crate::rng;

/// Floor on the exponential mean; the linear part of the mean is
/// sign-indefinite.
pub const MIN_MEAN: f64 = 1e-3;

/// Two-risk synthetic generator.
///
/// Three covariate blocks `x1, x2, x3 ~ N(0, I)` of dimension `block_dim`,
/// coefficient vectors `γ1, γ2, γ3 ~ N(0, I)` drawn once per seed, and
///
/// ```text
/// T1 ~ Exponential(mean = max((γ3·x3)² + γ1·x1, 1e-3))
/// T2 ~ Exponential(mean = max((γ3·x3)² + γ2·x2, 1e-3))
/// ```
///
/// The observed time is `min(T1, T2)` with the argmin as label. A random
/// `censor_fraction` of rows is then censored at `U(0, min(T1, T2))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorSpec {
    pub n: usize,
    pub block_dim: usize,
    pub seed: u64,
    pub censor_fraction: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n: 30_000,
            block_dim: 4,
            seed: 1,
            censor_fraction: 0.5,
        }
    }
}

/// Generated data together with what produced it.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub data: SurvivalDataset,
    /// Latent `(T1, T2)` per row, before censoring.
    pub latent_times: Vec<(f64, f64)>,
    /// `[γ1, γ2, γ3]`, each of length `block_dim`.
    pub gammas: [Vec<f64>; 3],
}

fn uniform_below<R: Rng>(rng: &mut R, upper: f64) -> f64 {
    // strictly inside (0, upper)
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u * upper;
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.block_dim == 0 {
            return Err(DsmError::InvalidArgument("generator needs n > 0 and block_dim > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.censor_fraction) {
            return Err(DsmError::InvalidArgument(format!(
                "censor fraction {} outside [0, 1]",
                self.censor_fraction
            )));
        }
        Ok(())
    }

    pub fn sample(&self) -> Result<SyntheticSample> {
        self.validate()?;
        let b = self.block_dim;
        let d = 3 * b;
        let mut g_rng = rng::stream(self.seed, "synthetic/gamma");
        let gammas: [Vec<f64>; 3] =
            std::array::from_fn(|_| (0..b).map(|_| StandardNormal.sample(&mut g_rng)).collect());

        let mut x_rng = rng::stream(self.seed, "synthetic/features");
        let mut t_rng = rng::stream(self.seed, "synthetic/times");
        let mut features = Vec::with_capacity(self.n * d);
        let mut times = Vec::with_capacity(self.n);
        let mut labels = Vec::with_capacity(self.n);
        let mut latent_times = Vec::with_capacity(self.n);
        let dot = |g: &[f64], x: &[f64]| g.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
        for _ in 0..self.n {
            let start = features.len();
            features.extend((0..d).map(|_| -> f64 { StandardNormal.sample(&mut x_rng) }));
            let x = &features[start..];
            let shared = dot(&gammas[2], &x[2 * b..]).powi(2);
            let mean1 = (shared + dot(&gammas[0], &x[..b])).max(MIN_MEAN);
            let mean2 = (shared + dot(&gammas[1], &x[b..2 * b])).max(MIN_MEAN);
            let e1: f64 = Exp1.sample(&mut t_rng);
            let e2: f64 = Exp1.sample(&mut t_rng);
            let (t1, t2) = ((mean1 * e1).max(f64::MIN_POSITIVE), (mean2 * e2).max(f64::MIN_POSITIVE));
            latent_times.push((t1, t2));
            if t1 <= t2 {
                times.push(t1);
                labels.push(1);
            } else {
                times.push(t2);
                labels.push(2);
            }
        }

        let n_censored = (self.censor_fraction * self.n as f64).round() as usize;
        let mut c_rng = rng::stream(self.seed, "synthetic/censor");
        let mut chosen = rand::seq::index::sample(&mut c_rng, self.n, n_censored).into_vec();
        chosen.sort_unstable();
        for i in chosen {
            times[i] = uniform_below(&mut c_rng, times[i]);
            labels[i] = 0;
        }

        let names = (1..=3)
            .flat_map(|blk| (1..=b).map(move |j| format!("x{blk}_{j}")))
            .collect();
        let data = SurvivalDataset::new(features, d, times, labels, names, 2)?;
        Ok(SyntheticSample {
            data,
            latent_times,
            gammas,
        })
    }
}

pub fn generate_synthetic(spec: &GeneratorSpec) -> Result<SurvivalDataset> {
    Ok(spec.sample()?.data)
}

/// Censors a random `fraction` of the uncensored rows at `U(0, T)`.
pub fn apply_artificial_censoring(data: &SurvivalDataset, fraction: f64, seed: u64) -> Result<SurvivalDataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(DsmError::InvalidArgument(format!("censoring fraction {fraction} outside [0, 1]")));
    }
    let uncensored: Vec<usize> = (0..data.len()).filter(|&i| data.label(i) != 0).collect();
    let count = (fraction * uncensored.len() as f64).round() as usize;
    let mut r = rng::stream(seed, "artificial-censoring");
    let mut picks = rand::seq::index::sample(&mut r, uncensored.len(), count).into_vec();
    picks.sort_unstable();
    let mut times = data.times().to_vec();
    let mut labels = data.labels().to_vec();
    for p in picks {
        let i = uncensored[p];
        times[i] = uniform_below(&mut r, times[i]);
        labels[i] = 0;
    }
    data.with_outcomes(times, labels, data.n_risks())
}
