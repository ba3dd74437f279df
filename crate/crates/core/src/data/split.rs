use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::SurvivalDataset;
use crate::error::{DsmError, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

fn by_label(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups
}

/// Label-stratified k-fold partition.
///
/// Each label group is shuffled with its own stream and dealt round-robin,
/// continuing the deal across groups so fold sizes differ by at most one.
pub fn kfold_split(data: &SurvivalDataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    kfold_indices(data.labels(), k, seed)
}

pub(crate) fn kfold_indices(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Fold>> {
    let n = labels.len();
    if k < 2 {
        return Err(DsmError::InvalidArgument(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > n {
        return Err(DsmError::InvalidArgument(format!("k = {k} exceeds the {n} rows")));
    }
    let mut assignment = vec![0usize; n];
    let mut pos = 0usize;
    for (label, mut rows) in by_label(labels) {
        rows.shuffle(&mut rng::substream(seed, "kfold", label as u64));
        for r in rows {
            assignment[r] = pos % k;
            pos += 1;
        }
    }
    Ok((0..k)
        .map(|f| Fold {
            train: (0..n).filter(|&i| assignment[i] != f).collect(),
            validation: (0..n).filter(|&i| assignment[i] == f).collect(),
        })
        .collect())
}

/// Splits rows into (kept, held out), holding out `floor(fraction · n_l)` rows
/// of each label `l`. Each label group uses its own stream, so removing all
/// rows of one label leaves the split of the others unchanged. Both lists
/// are in ascending row order.
pub fn stratified_holdout(labels: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut held = vec![false; labels.len()];
    for (label, mut rows) in by_label(labels) {
        rows.shuffle(&mut rng::substream(seed, "holdout", label as u64));
        let take = (fraction * rows.len() as f64).floor() as usize;
        for &r in &rows[..take] {
            held[r] = true;
        }
    }
    let kept = (0..labels.len()).filter(|&i| !held[i]).collect();
    let out = (0..labels.len()).filter(|&i| held[i]).collect();
    (kept, out)
}

/// Two single-risk halves of a two-risk dataset.
#[derive(Debug, Clone)]
pub struct TransferSplit {
    /// First half, event 1 against censoring; rows whose first event was
    /// risk 2 are dropped.
    pub a: SurvivalDataset,
    /// Second half, event 2 (relabelled 1) against censoring; rows whose first
    /// event was risk 1 are dropped.
    pub b: SurvivalDataset,
    pub a_rows: Vec<usize>,
    pub b_rows: Vec<usize>,
    pub discarded_a: usize,
    pub discarded_b: usize,
}

pub fn transfer_split(data: &SurvivalDataset) -> Result<TransferSplit> {
    if data.n_risks() != 2 {
        return Err(DsmError::InvalidArgument(format!(
            "transfer split needs a two-risk dataset, got {} risks",
            data.n_risks()
        )));
    }
    let half = data.len() / 2;
    let a_rows: Vec<usize> = (0..half).filter(|&i| data.label(i) != 2).collect();
    let b_rows: Vec<usize> = (half..data.len()).filter(|&i| data.label(i) != 1).collect();
    let single = |rows: &[usize], risk: usize| -> Result<SurvivalDataset> {
        let sub = data.subset(rows);
        let labels = sub.labels().iter().map(|&l| usize::from(l == risk)).collect();
        sub.with_outcomes(sub.times().to_vec(), labels, 1)
    };
    Ok(TransferSplit {
        a: single(&a_rows, 1)?,
        b: single(&b_rows, 2)?,
        discarded_a: half - a_rows.len(),
        discarded_b: (data.len() - half) - b_rows.len(),
        a_rows,
        b_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, GeneratorSpec};

    fn toy(labels: Vec<usize>) -> SurvivalDataset {
        let n = labels.len();
        SurvivalDataset::new(
            (0..n).map(|i| i as f64).collect(),
            1,
            (1..=n).map(|i| i as f64).collect(),
            labels,
            vec!["x".into()],
            2,
        )
        .unwrap()
    }

    #[test]
    fn folds_partition_the_rows() {
        let data = toy((0..97).map(|i| i % 3).collect());
        let folds = kfold_split(&data, 5, 3).unwrap();
        let mut seen = vec![0; data.len()];
        for f in &folds {
            for &v in &f.validation {
                seen[v] += 1;
            }
            assert_eq!(f.train.len() + f.validation.len(), data.len());
            assert!(f.train.iter().all(|t| !f.validation.contains(t)));
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn leave_one_out_and_bad_k() {
        let data = toy(vec![0, 1, 1, 2, 0]);
        let folds = kfold_split(&data, 5, 0).unwrap();
        assert!(folds.iter().all(|f| f.validation.len() == 1));
        assert!(kfold_split(&data, 6, 0).is_err());
        assert!(kfold_split(&data, 1, 0).is_err());
    }

    #[test]
    fn folds_are_stratified() {
        let data = generate_synthetic(&GeneratorSpec {
            n: 5000,
            ..GeneratorSpec::default()
        })
        .unwrap();
        let global = 1.0 - data.censored_count() as f64 / data.len() as f64;
        for f in kfold_split(&data, 5, 17).unwrap() {
            let events = f.validation.iter().filter(|&&i| data.label(i) != 0).count();
            let rate = events as f64 / f.validation.len() as f64;
            assert!((rate - global).abs() <= 0.05, "{rate} vs {global}");
        }
    }

    #[test]
    fn holdout_ignores_other_labels() {
        let labels = vec![1, 0, 1, 1, 0, 1, 0, 1, 1, 1, 1, 0, 1];
        let (_, out_full) = stratified_holdout(&labels, 0.3, 5);
        let kept_rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
        let only_events: Vec<usize> = kept_rows.iter().map(|&i| labels[i]).collect();
        let (_, out_events) = stratified_holdout(&only_events, 0.3, 5);
        let mapped: Vec<usize> = out_events.iter().map(|&j| kept_rows[j]).collect();
        let full_events: Vec<usize> = out_full.into_iter().filter(|&i| labels[i] == 1).collect();
        assert_eq!(mapped, full_events);
    }

    #[test]
    fn transfer_halves() {
        let data = generate_synthetic(&GeneratorSpec {
            n: 2000,
            ..GeneratorSpec::default()
        })
        .unwrap();
        let s = transfer_split(&data).unwrap();
        assert!(s.a_rows.iter().all(|r| !s.b_rows.contains(r)));
        assert!(s.a_rows.iter().all(|&r| data.label(r) != 2));
        assert!(s.b_rows.iter().all(|&r| data.label(r) != 1));
        assert_eq!(s.a.len() + s.discarded_a, 1000);
        assert_eq!(s.b.len() + s.discarded_b, 1000);
        assert_eq!(s.a.n_risks(), 1);
        assert_eq!(s.b.event_count(1), (1000..2000).filter(|&i| data.label(i) == 2).count());
    }
}
