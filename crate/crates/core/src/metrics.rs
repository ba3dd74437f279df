//! Survival metrics: Kaplan-Meier, censoring weights, time-dependent
//! concordance, censoring-weighted Brier score and Harrell's C.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::SurvivalDataset;
use crate::error::{DsmError, Result};
use crate::model::DsmModel;

/// Default evaluation quantiles of event times.
pub const DEFAULT_LEVELS: [f64; 3] = [0.25, 0.5, 0.75];

/// Right-continuous, non-increasing step function starting at 1.
///
/// `eval(t)` is the value at the largest breakpoint `<= t`; `left_limit(t)`
/// uses the largest breakpoint strictly below `t`. Both are 1 before the
/// first breakpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl StepFunction {
    /// The constant function 1.
    pub fn one() -> Self {
        Self {
            times: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self.times.partition_point(|&b| b <= t) {
            0 => 1.0,
            i => self.values[i - 1],
        }
    }

    pub fn left_limit(&self, t: f64) -> f64 {
        match self.times.partition_point(|&b| b < t) {
            0 => 1.0,
            i => self.values[i - 1],
        }
    }
}

fn check_lengths(context: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(DsmError::DimensionMismatch {
            context: context.into(),
            expected,
            actual,
        });
    }
    Ok(())
}

fn check_times(times: &[f64]) -> Result<()> {
    if let Some(&t) = times.iter().find(|&&t| !(t >= 0.0 && t.is_finite())) {
        return Err(DsmError::Domain(format!("time {t} must be finite and >= 0")));
    }
    Ok(())
}

/// Product-limit estimator `Π_{t_j <= t} (1 - d_j / n_j)` with breakpoints at
/// distinct event times.
pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Result<StepFunction> {
    check_lengths("event flags", times.len(), events.len())?;
    if times.is_empty() {
        return Err(DsmError::Empty("Kaplan-Meier needs at least one observation".into()));
    }
    check_times(times)?;
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut at_risk = times.len();
    let mut s = 1.0;
    let mut out = StepFunction::one();
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut deaths = 0usize;
        let mut j = i;
        while j < order.len() && times[order[j]] == t {
            deaths += usize::from(events[order[j]]);
            j += 1;
        }
        if deaths > 0 {
            s *= 1.0 - deaths as f64 / at_risk as f64;
            out.times.push(t);
            out.values.push(s);
        }
        at_risk -= j - i;
        i = j;
    }
    Ok(out)
}

/// `Ĝ`: Kaplan-Meier of the censoring times (label 0 treated as the event).
pub fn censoring_distribution(data: &SurvivalDataset) -> Result<StepFunction> {
    let flags: Vec<bool> = data.labels().iter().map(|&l| l == 0).collect();
    kaplan_meier(data.times(), &flags)
}

/// Concordance estimate together with the number of comparable pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairStats {
    /// `None` when no pair was comparable.
    pub value: Option<f64>,
    pub comparable: usize,
}

/// Fenwick tree over score ranks.
struct Fenwick(Vec<usize>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Self(vec![0; n + 1])
    }

    fn add(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted ranks `< rank`.
    fn below(&self, rank: usize) -> usize {
        let mut i = rank;
        let mut total = 0;
        while i > 0 {
            total += self.0[i];
            i -= i & i.wrapping_neg();
        }
        total
    }
}

/// Per anchor row `i`: (concordant, tied, comparable) counts against rows
/// with strictly later times. Only rows with `anchor[i]` are counted.
fn pair_counts(scores: &[f64], times: &[f64], anchor: &[bool]) -> Result<Vec<(usize, usize, usize)>> {
    if let Some(&s) = scores.iter().find(|s| s.is_nan()) {
        return Err(DsmError::NonFinite(format!("risk score {s}")));
    }
    let n = scores.len();
    let mut sorted_scores: Vec<f64> = scores.to_vec();
    sorted_scores.sort_by(f64::total_cmp);
    sorted_scores.dedup();
    let rank = |s: f64| sorted_scores.partition_point(|&v| v < s);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    let mut tree = Fenwick::new(sorted_scores.len());
    let mut counts = vec![(0, 0, 0); n];
    let mut inserted = 0usize;
    let mut i = 0;
    while i < n {
        let t = times[order[i]];
        let mut j = i;
        while j < n && times[order[j]] == t {
            j += 1;
        }
        for &row in &order[i..j] {
            if anchor[row] {
                let r = rank(scores[row]);
                let below = tree.below(r);
                let tied = tree.below(r + 1) - below;
                counts[row] = (below, tied, inserted);
            }
        }
        for &row in &order[i..j] {
            tree.add(rank(scores[row]));
        }
        inserted += j - i;
        i = j;
    }
    Ok(counts)
}

/// Time-dependent concordance at `horizon`.
///
/// Comparable pairs are `(i, j)` with `δ_i = 1`, `T_i < T_j` and
/// `T_i <= horizon`; each pair has weight `1 / Ĝ(T_i⁻)²`. A pair is
/// concordant when `score_i > score_j`; equal scores count one half. Rows
/// with `Ĝ(T_i⁻) = 0` are dropped with a warning.
pub fn ctd(scores: &[f64], times: &[f64], events: &[bool], horizon: f64, censoring: &StepFunction) -> Result<PairStats> {
    check_lengths("risk scores", times.len(), scores.len())?;
    check_lengths("event flags", times.len(), events.len())?;
    check_times(times)?;
    if !(horizon > 0.0) {
        return Err(DsmError::Domain(format!("truncation horizon {horizon} must be > 0")));
    }
    let mut dropped = 0usize;
    let anchor: Vec<bool> = (0..times.len())
        .map(|i| {
            let ok = events[i] && times[i] <= horizon;
            if ok && censoring.left_limit(times[i]) <= 0.0 {
                dropped += 1;
                return false;
            }
            ok
        })
        .collect();
    if dropped > 0 {
        log::warn!("ctd: dropped {dropped} events with zero censoring survival");
    }
    let counts = pair_counts(scores, times, &anchor)?;
    let (mut num, mut den, mut pairs) = (0.0, 0.0, 0usize);
    for (i, &(conc, tied, comparable)) in counts.iter().enumerate() {
        if !anchor[i] || comparable == 0 {
            continue;
        }
        let g = censoring.left_limit(times[i]);
        let w = 1.0 / (g * g);
        num += w * (conc as f64 + 0.5 * tied as f64);
        den += w * comparable as f64;
        pairs += comparable;
    }
    Ok(PairStats {
        value: (pairs > 0).then(|| num / den),
        comparable: pairs,
    })
}

/// Harrell's C: unweighted concordant fraction over pairs with `δ_i = 1`
/// and `T_i < T_j`, ties in score counting one half.
pub fn harrell_c(scores: &[f64], times: &[f64], events: &[bool]) -> Result<PairStats> {
    check_lengths("risk scores", times.len(), scores.len())?;
    check_lengths("event flags", times.len(), events.len())?;
    check_times(times)?;
    let counts = pair_counts(scores, times, events)?;
    let (mut half_units, mut pairs) = (0usize, 0usize);
    for (i, &(conc, tied, comparable)) in counts.iter().enumerate() {
        if events[i] {
            half_units += 2 * conc + tied;
            pairs += comparable;
        }
    }
    Ok(PairStats {
        value: (pairs > 0).then(|| half_units as f64 / (2 * pairs) as f64),
        comparable: pairs,
    })
}

/// Censoring-weighted Brier score of predicted survival at `horizon`:
///
/// ```text
/// (1/n) Σ_i [ 1{T_i <= t*, δ_i = 1} S_i² / Ĝ(T_i⁻) + 1{T_i > t*} (1 - S_i)² / Ĝ(t*) ]
/// ```
///
/// Rows whose needed `Ĝ` is zero are dropped (with a warning) and excluded
/// from `n`.
pub fn brier(survival: &[f64], times: &[f64], events: &[bool], horizon: f64, censoring: &StepFunction) -> Result<f64> {
    check_lengths("predicted survival", times.len(), survival.len())?;
    check_lengths("event flags", times.len(), events.len())?;
    check_times(times)?;
    if !(horizon > 0.0) {
        return Err(DsmError::Domain(format!("truncation horizon {horizon} must be > 0")));
    }
    if times.is_empty() {
        return Err(DsmError::Empty("Brier score over no rows".into()));
    }
    let g_horizon = censoring.eval(horizon);
    let (mut total, mut n, mut dropped) = (0.0, 0usize, 0usize);
    for i in 0..times.len() {
        let s = survival[i];
        if times[i] <= horizon && events[i] {
            let g = censoring.left_limit(times[i]);
            if g <= 0.0 {
                dropped += 1;
                continue;
            }
            total += s * s / g;
        } else if times[i] > horizon {
            if g_horizon <= 0.0 {
                dropped += 1;
                continue;
            }
            total += (1.0 - s) * (1.0 - s) / g_horizon;
        }
        n += 1;
    }
    if dropped > 0 {
        log::warn!("brier: dropped {dropped} rows with zero censoring survival");
    }
    if n == 0 {
        return Err(DsmError::Empty("every row was dropped from the Brier score".into()));
    }
    Ok(total / n as f64)
}

/// Quantile levels and their resolved event times.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalHorizons {
    pub levels: Vec<f64>,
    pub times: Vec<f64>,
}

/// Nearest-rank quantiles of the event times of `risk` (rows with
/// `label == risk`); censored and other-risk rows are ignored.
pub fn event_quantiles(data: &SurvivalDataset, risk: usize, levels: &[f64]) -> Result<EvalHorizons> {
    let mut events: Vec<f64> = (0..data.len())
        .filter(|&i| data.label(i) == risk)
        .map(|i| data.time(i))
        .collect();
    if events.is_empty() {
        return Err(DsmError::NoEvents { risk });
    }
    events.sort_by(f64::total_cmp);
    let n = events.len();
    let mut times = Vec::with_capacity(levels.len());
    for &p in levels {
        if !(p > 0.0 && p <= 1.0) {
            return Err(DsmError::InvalidArgument(format!("quantile level {p} outside (0, 1]")));
        }
        let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
        times.push(events[rank - 1]);
    }
    Ok(EvalHorizons {
        levels: levels.to_vec(),
        times,
    })
}

/// Fixed horizon times shared by every risk, with NaN levels.
pub fn absolute_horizons(times: &[f64], risks: usize) -> Result<Vec<EvalHorizons>> {
    if let Some(t) = times.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(DsmError::Domain(format!("horizon {t} must be finite and > 0")));
    }
    Ok(vec![
        EvalHorizons {
            levels: vec![f64::NAN; times.len()],
            times: times.to_vec(),
        };
        risks
    ])
}

/// One line of a metric report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub risk: usize,
    pub horizon_level: f64,
    pub horizon_time: f64,
    pub ctd: Option<f64>,
    pub brier: f64,
    pub n_pairs: usize,
}

/// Evaluates `model` on `data` at the given per-risk horizons (index
/// `m - 1` holds the horizons of risk `m`). `Ĝ` is estimated from `data`.
pub fn evaluate_model(model: &DsmModel, data: &SurvivalDataset, horizons: &[EvalHorizons]) -> Result<Vec<MetricRow>> {
    check_lengths("horizon sets", model.risks(), horizons.len())?;
    if data.is_empty() {
        return Err(DsmError::Empty("evaluation data".into()));
    }
    let censoring = censoring_distribution(data)?;
    let max_time = data.times().iter().copied().fold(0.0, f64::max);
    // survival[m][h][i]
    let per_row: Vec<Vec<Vec<f64>>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let x = data.row(i);
            (0..model.risks())
                .map(|m| {
                    let mix = model.instance_mixture(m + 1, x)?;
                    horizons[m].times.iter().map(|&t| mix.survival(t)).collect()
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (m, h) in horizons.iter().enumerate() {
        let risk = m + 1;
        let events: Vec<bool> = data.labels().iter().map(|&l| l == risk).collect();
        for (j, (&level, &t)) in h.levels.iter().zip(&h.times).enumerate() {
            if t > max_time {
                log::warn!("horizon {t} for risk {risk} is beyond the last observed time {max_time}");
            }
            let survival: Vec<f64> = per_row.iter().map(|r| r[m][j]).collect();
            let cif: Vec<f64> = survival.iter().map(|s| 1.0 - s).collect();
            let c = ctd(&cif, data.times(), &events, t, &censoring)?;
            rows.push(MetricRow {
                risk,
                horizon_level: level,
                horizon_time: t,
                ctd: c.value,
                brier: brier(&survival, data.times(), &events, t, &censoring)?,
                n_pairs: c.comparable,
            });
        }
    }
    Ok(rows)
}

/// CSV text of a quantile level; absolute horizons carry a NaN level and
/// are written as an empty field.
pub fn level_field(level: f64) -> String {
    if level.is_finite() {
        level.to_string()
    } else {
        String::new()
    }
}

/// Writes rows as CSV with header `risk,horizon_level,horizon_time,ctd,brier,n_pairs`.
/// An absent C^td is written as an empty field.
pub fn write_metric_rows<W: Write>(rows: &[MetricRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["risk", "horizon_level", "horizon_time", "ctd", "brier", "n_pairs"])?;
    for r in rows {
        out.write_record([
            r.risk.to_string(),
            crate::metrics::level_field(r.horizon_level),
            r.horizon_time.to_string(),
            r.ctd.map(|c| c.to_string()).unwrap_or_default(),
            r.brier.to_string(),
            r.n_pairs.to_string(),
        ])?;
    }
    out.flush().map_err(|e| DsmError::io("<metric writer>", e))
}
