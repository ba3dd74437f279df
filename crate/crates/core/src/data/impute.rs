use std::collections::BTreeMap;

use super::csv_io::{RawColumn, RawTable};
use crate::error::{DsmError, Result};

/// Suggested normal values for SUPPORT physiology columns, keyed by the
/// usual SUPPORT column names.
pub fn support_normal_values() -> BTreeMap<String, f64> {
    [
        ("alb", 3.5),
        ("pafi", 333.3),
        ("bili", 1.01),
        ("crea", 1.01),
        ("bun", 6.51),
        ("wblc", 9.0),
        ("urine", 2502.0),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Fill {
    Value(f64),
    Level(usize),
}

/// Per-column fill values learned from training rows: mean for numeric
/// columns, mode for categorical ones, or a fixed override.
#[derive(Debug, Clone, PartialEq)]
pub struct Imputer {
    fills: Vec<(String, Fill)>,
}

impl Imputer {
    pub fn fit(raw: &RawTable, train_rows: &[usize], overrides: &BTreeMap<String, f64>) -> Result<Self> {
        let mut fills = Vec::with_capacity(raw.columns.len());
        for col in &raw.columns {
            let fill = match col {
                RawColumn::Numeric { name, values } => {
                    if let Some(&v) = overrides.get(name) {
                        Fill::Value(v)
                    } else {
                        let observed: Vec<f64> = train_rows.iter().filter_map(|&r| values[r]).collect();
                        if observed.is_empty() {
                            return Err(DsmError::InvalidArgument(format!(
                                "column `{name}` has no observed values in the training rows"
                            )));
                        }
                        Fill::Value(observed.iter().sum::<f64>() / observed.len() as f64)
                    }
                }
                RawColumn::Categorical { name, levels, values } => {
                    let mut counts = vec![0usize; levels.len()];
                    for &r in train_rows {
                        if let Some(l) = values[r] {
                            counts[l] += 1;
                        }
                    }
                    // ties go to the earliest-seen level
                    let best = counts
                        .iter()
                        .enumerate()
                        .fold(None, |best: Option<(usize, usize)>, (l, &c)| match best {
                            Some((_, bc)) if bc >= c => best,
                            _ if c > 0 => Some((l, c)),
                            _ => best,
                        });
                    match best {
                        Some((l, _)) => Fill::Level(l),
                        None => {
                            return Err(DsmError::InvalidArgument(format!(
                                "column `{name}` has no observed values in the training rows"
                            )))
                        }
                    }
                }
            };
            fills.push((col.name().to_string(), fill));
        }
        Ok(Self { fills })
    }

    /// Fill value used for a numeric column, if any.
    pub fn numeric_fill(&self, column: &str) -> Option<f64> {
        self.fills.iter().find(|(n, _)| n == column).and_then(|(_, f)| match f {
            Fill::Value(v) => Some(*v),
            Fill::Level(_) => None,
        })
    }

    pub fn apply(&self, raw: &RawTable) -> Result<RawTable> {
        if raw.columns.len() != self.fills.len() {
            return Err(DsmError::DimensionMismatch {
                context: "imputer columns".into(),
                expected: self.fills.len(),
                actual: raw.columns.len(),
            });
        }
        let mut out = raw.clone();
        for (col, (name, fill)) in out.columns.iter_mut().zip(&self.fills) {
            if col.name() != name {
                return Err(DsmError::InvalidArgument(format!("column `{}` does not match imputer `{name}`", col.name())));
            }
            match (col, fill) {
                (RawColumn::Numeric { values, .. }, Fill::Value(v)) => {
                    values.iter_mut().filter(|x| x.is_none()).for_each(|x| *x = Some(*v));
                }
                (RawColumn::Categorical { values, .. }, Fill::Level(l)) => {
                    values.iter_mut().filter(|x| x.is_none()).for_each(|x| *x = Some(*l));
                }
                _ => return Err(DsmError::InvalidArgument(format!("column `{name}` changed type"))),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_csv_raw, CsvOptions};

    fn raw(text: &str) -> RawTable {
        parse_csv_raw(text.as_bytes(), &CsvOptions::default()).unwrap()
    }

    #[test]
    fn mean_and_mode_fill() {
        let t = raw("a,c,time,event\n1,x,1,1\n,y,2,0\n3,y,3,1\n5,,4,1\n");
        let imp = Imputer::fit(&t, &[0, 2], &BTreeMap::new()).unwrap();
        let d = imp.apply(&t).unwrap().into_dataset().unwrap();
        assert_eq!(d.row(1)[0], 2.0);
        // mode over train rows 0 and 2 is a tie broken by first appearance: x
        assert_eq!(&d.row(3)[1..], &[1.0, 0.0]);
    }

    #[test]
    fn support_override() {
        let t = raw("alb,time,event\n,1,1\n2.0,2,0\n");
        let imp = Imputer::fit(&t, &[0, 1], &support_normal_values()).unwrap();
        assert_eq!(imp.numeric_fill("alb"), Some(3.5));
        let d = imp.apply(&t).unwrap().into_dataset().unwrap();
        assert_eq!(d.row(0), &[3.5]);
        assert_eq!(d.row(1), &[2.0]);
    }

    #[test]
    fn fill_values_come_from_train_rows_only() {
        let a = raw("a,time,event\n1,1,1\n3,2,0\n100,3,1\n,4,1\n");
        let b = raw("a,time,event\n1,1,1\n3,2,0\n-7,3,1\n,4,1\n");
        let train = [0, 1];
        let fa = Imputer::fit(&a, &train, &BTreeMap::new()).unwrap();
        let fb = Imputer::fit(&b, &train, &BTreeMap::new()).unwrap();
        assert_eq!(fa, fb);
        assert_eq!(fa.numeric_fill("a"), Some(2.0));
    }

    #[test]
    fn all_missing_column_is_an_error() {
        let t = raw("a,b,time,event\n,1,1,1\n,2,2,0\n");
        assert!(Imputer::fit(&t, &[0, 1], &BTreeMap::new()).is_err());
    }

    #[test]
    fn imputation_is_idempotent() {
        let t = raw("a,c,time,event\n1,x,1,1\n,y,2,0\n3,,3,1\n");
        let imp = Imputer::fit(&t, &[0, 1, 2], &BTreeMap::new()).unwrap();
        let once = imp.apply(&t).unwrap();
        let twice = imp.apply(&once).unwrap();
        assert_eq!(once, twice);
        assert!(!once.has_missing());
    }
}
