//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Grid keys take comma-separated
//! lists; every other key takes one value.
//!
//! ```text
//! # grid
//! family = weibull, lognormal
//! k = 4, 6, 8
//! alpha = 0.5, 0.75, 1
//! lambda = 1e-8
//! learning_rate = 1e-3, 1e-4
//! layers = 1, 2
//! width = 50, 100
//! # run
//! max_epochs = 200
//! patience = 10
//! batch_size = auto
//! validation_fraction = 0.1
//! seed = 0
//! folds = 5
//! levels = 0.25, 0.5, 0.75, 1
//! censoring_fractions = 0, 0.25, 0.5
//! ```

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use crate::distributions::PrimitiveFamily;
use crate::error::{DsmError, Result};
use crate::training::{CvOptions, GridSpec, TrainConfig};

/// Everything a CLI run needs besides its input paths.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub grid: GridSpec,
    /// Non-grid training settings; grid fields here are ignored.
    pub base: TrainConfig,
    pub cv: CvOptions,
    /// Artificial-censoring fractions for the ablation command.
    pub censoring_fractions: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            base: TrainConfig::default(),
            cv: CvOptions::default(),
            censoring_fractions: vec![0.0, 0.25, 0.5],
        }
    }
}

pub const MAX_GRID_POINTS: usize = 10_000;

pub const KEYS: [&str; 16] = [
    "family",
    "k",
    "alpha",
    "lambda",
    "learning_rate",
    "layers",
    "width",
    "max_epochs",
    "patience",
    "batch_size",
    "validation_fraction",
    "seed",
    "folds",
    "levels",
    "censoring_fractions",
    "selection_levels",
];

fn list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String> {
    let items: Vec<&str> = value.split(',').map(str::trim).collect();
    if items.iter().any(|s| s.is_empty()) {
        return Err("empty list element".into());
    }
    items
        .into_iter()
        .map(|s| s.parse().map_err(|_| format!("cannot parse `{s}`")))
        .collect()
}

fn one<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    let v = value.trim();
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn finite(values: &[f64]) -> std::result::Result<(), String> {
    match values.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(format!("non-finite value {v}")),
        None => Ok(()),
    }
}

impl RunConfig {
    /// Applies one setting. Errors are plain messages; callers attach a
    /// location.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "family" => {
                self.grid.families = list::<String>(value)?
                    .iter()
                    .map(|s| s.parse::<PrimitiveFamily>().map_err(|e| e.to_string()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "k" => self.grid.ks = list(value)?,
            "alpha" => self.grid.alphas = list(value)?,
            "lambda" => self.grid.lambdas = list(value)?,
            "learning_rate" => self.grid.learning_rates = list(value)?,
            "layers" => self.grid.depths = list(value)?,
            "width" => self.grid.widths = list(value)?,
            "max_epochs" => self.base.max_epochs = one(value)?,
            "patience" => self.base.patience = one(value)?,
            "batch_size" => {
                self.base.batch_size = match value.trim() {
                    "auto" => None,
                    v => Some(one(v)?),
                }
            }
            "validation_fraction" => self.base.validation_fraction = one(value)?,
            "seed" => {
                let seed = one(value)?;
                self.base.seed = seed;
                self.cv.seed = seed;
            }
            "folds" => self.cv.folds = one(value)?,
            "levels" => self.cv.levels = list(value)?,
            "selection_levels" => self.cv.selection_levels = list(value)?,
            "censoring_fractions" => self.censoring_fractions = list(value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Checks ranges after all settings are applied.
    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        let bad = |what: &str| Err(DsmError::InvalidArgument(what.to_string()));
        for (name, v) in [("alpha", &g.alphas), ("lambda", &g.lambdas), ("learning_rate", &g.learning_rates)] {
            finite(v).map_err(DsmError::InvalidArgument)?;
            if v.is_empty() {
                return bad(&format!("`{name}` needs at least one value"));
            }
        }
        if g.families.is_empty() || g.ks.is_empty() || g.depths.is_empty() || g.widths.is_empty() {
            return bad("every grid key needs at least one value");
        }
        if g.depths.contains(&0) || g.widths.contains(&0) {
            return bad("layers and width must be >= 1");
        }
        let size = [g.families.len(), g.ks.len(), g.alphas.len(), g.lambdas.len(), g.learning_rates.len(), g.depths.len(), g.widths.len()]
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .unwrap_or(usize::MAX);
        if size > MAX_GRID_POINTS {
            return bad(&format!("grid has {size} points, more than {MAX_GRID_POINTS}"));
        }
        for cfg in self.grid.expand(&self.base) {
            cfg.validate()?;
        }
        if self.cv.folds < 2 {
            return bad("folds must be >= 2");
        }
        finite(&self.cv.levels).map_err(DsmError::InvalidArgument)?;
        if self.cv.levels.iter().any(|&l| !(l > 0.0 && l <= 1.0)) {
            return bad("levels must lie in (0, 1]");
        }
        if let Some(l) = self.cv.selection_levels.iter().find(|l| !self.cv.levels.contains(l)) {
            return bad(&format!("selection level {l} is not listed in `levels`"));
        }
        if self.censoring_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("censoring fractions must lie in [0, 1]");
        }
        Ok(())
    }

    /// Fingerprint of every setting: SHA-256 over the grid point hashes and
    /// the cross-validation options, first 16 hex digits.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in self.grid_points() {
            h.update(p.canonical().as_bytes());
            h.update(b"\n");
        }
        h.update(format!("{:?}|{:?}", self.cv, self.censoring_fractions).as_bytes());
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The grid points with this config's run settings.
    pub fn grid_points(&self) -> Vec<TrainConfig> {
        self.grid.expand(&self.base)
    }
}

/// Parses configuration text on top of the defaults. Never panics.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(DsmError::parse(line_no, "1", "expected `key = value`"));
        };
        let key = key.trim();
        let column = raw.find('=').map_or(1, |c| c + 2);
        if !seen.insert(key.to_string()) {
            return Err(DsmError::parse(line_no, "1", format!("duplicate key `{key}`")));
        }
        cfg.set(key, value)
            .map_err(|m| DsmError::parse(line_no, column.to_string(), format!("{key}: {m}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| DsmError::io(path, e))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_gives_the_defaults() {
        assert_eq!(parse_config("").unwrap(), RunConfig::default());
        assert_eq!(parse_config("# nothing\n\n").unwrap().grid_points().len(), 144);
    }

    #[test]
    fn lists_and_scalars() {
        let cfg = parse_config(
            "family = lognormal\nk = 2,3 # two\nalpha=1\nlearning_rate = 1e-3\nlayers=1\nwidth = 8\nbatch_size = 64\nseed = 7\nfolds = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.grid.families, vec![PrimitiveFamily::LogNormal]);
        assert_eq!(cfg.grid.ks, vec![2, 3]);
        assert_eq!(cfg.base.batch_size, Some(64));
        assert_eq!((cfg.base.seed, cfg.cv.seed, cfg.cv.folds), (7, 7, 3));
        let points = cfg.grid_points();
        assert_eq!(points.len(), 2);
        assert_eq!(points[1].hidden, vec![8]);
    }

    #[test]
    fn errors_carry_a_location() {
        match parse_config("k = 4\nalpha = 0.5,,1\n") {
            Err(DsmError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_config("bogus = 1").is_err());
        assert!(parse_config("k = 4\nk = 6").is_err());
        assert!(parse_config("no equals sign").is_err());
        assert!(parse_config("alpha = 2").is_err());
        assert!(parse_config("folds = 1").is_err());
        assert!(parse_config("levels = 0.5\nselection_levels = 0.25").is_err());
    }

    proptest! {
        #[test]
        fn parser_never_panics(text in "\\PC{0,200}") {
            let _ = parse_config(&text);
        }

        #[test]
        fn known_keys_with_garbage_never_panic(key in 0usize..KEYS.len(), value in "[ -~]{0,20}") {
            let _ = parse_config(&format!("{} = {value}", KEYS[key]));
        }
    }
}
