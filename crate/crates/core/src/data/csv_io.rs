use std::io::{Read, Write};
use std::path::Path;

use super::SurvivalDataset;
use crate::error::{DsmError, Result};

#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub time_column: String,
    pub label_column: String,
    /// Cell contents (after trimming) treated as missing.
    pub missing_tokens: Vec<String>,
    /// Upper bound on the number of risks; `None` infers it from the labels.
    pub n_risks: Option<usize>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            time_column: "time".into(),
            label_column: "event".into(),
            missing_tokens: ["", "NA", "na", "NaN", "nan", "?", "null"].map(String::from).to_vec(),
            n_risks: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RawColumn {
    Numeric {
        name: String,
        values: Vec<Option<f64>>,
    },
    /// Levels in first-appearance order; values index into `levels`.
    Categorical {
        name: String,
        levels: Vec<String>,
        values: Vec<Option<usize>>,
    },
}

impl RawColumn {
    pub fn name(&self) -> &str {
        match self {
            RawColumn::Numeric { name, .. } | RawColumn::Categorical { name, .. } => name,
        }
    }

    pub fn is_missing(&self, row: usize) -> bool {
        match self {
            RawColumn::Numeric { values, .. } => values[row].is_none(),
            RawColumn::Categorical { values, .. } => values[row].is_none(),
        }
    }

    /// Number of encoded feature columns.
    pub fn width(&self) -> usize {
        match self {
            RawColumn::Numeric { .. } => 1,
            RawColumn::Categorical { levels, .. } => levels.len(),
        }
    }
}

/// Parsed CSV before missing values are resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub columns: Vec<RawColumn>,
    pub times: Vec<f64>,
    pub labels: Vec<usize>,
    pub n_risks: usize,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn has_missing(&self) -> bool {
        self.columns.iter().any(|c| (0..self.len()).any(|r| c.is_missing(r)))
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for c in &self.columns {
            match c {
                RawColumn::Numeric { name, .. } => names.push(name.clone()),
                RawColumn::Categorical { name, levels, .. } => {
                    names.extend(levels.iter().map(|l| format!("{name}={l}")))
                }
            }
        }
        names
    }

    /// Encodes the table; fails on the first missing cell.
    pub fn into_dataset(self) -> Result<SurvivalDataset> {
        for c in &self.columns {
            if let Some(r) = (0..self.len()).find(|&r| c.is_missing(r)) {
                // +2: one-based and the header line
                return Err(DsmError::parse(r + 2, c.name(), "missing value (enable imputation to fill it)"));
            }
        }
        let names = self.feature_names();
        let width = names.len();
        let mut features = vec![0.0; self.len() * width];
        let mut offset = 0;
        for c in &self.columns {
            match c {
                RawColumn::Numeric { values, .. } => {
                    for (r, v) in values.iter().enumerate() {
                        features[r * width + offset] = v.unwrap_or_default();
                    }
                }
                RawColumn::Categorical { values, .. } => {
                    for (r, v) in values.iter().enumerate() {
                        if let Some(level) = v {
                            features[r * width + offset + level] = 1.0;
                        }
                    }
                }
            }
            offset += c.width();
        }
        SurvivalDataset::new(features, width, self.times, self.labels, names, self.n_risks)
    }
}

fn is_missing(cell: &str, opts: &CsvOptions) -> bool {
    let c = cell.trim();
    opts.missing_tokens.iter().any(|m| m == c)
}

/// Parses CSV text. Numeric columns are those whose every non-missing cell
/// parses as a finite real; all other feature columns are categorical.
pub fn parse_csv_raw<R: Read>(reader: R, opts: &CsvOptions) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DsmError::parse(1, name, "required column not found in header"))
    };
    let time_idx = find(&opts.time_column)?;
    let label_idx = find(&opts.label_column)?;
    for (i, h) in headers.iter().enumerate() {
        if headers[..i].contains(h) {
            return Err(DsmError::parse(1, h.as_str(), "duplicate column name"));
        }
    }
    let feature_idx: Vec<usize> = (0..headers.len()).filter(|&i| i != time_idx && i != label_idx).collect();

    let mut cells: Vec<Vec<String>> = vec![Vec::new(); feature_idx.len()];
    let mut times = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let line = r + 2;
        if record.len() != headers.len() {
            return Err(DsmError::parse(
                line,
                "*",
                format!("expected {} fields, found {}", headers.len(), record.len()),
            ));
        }
        let t_cell = record[time_idx].trim();
        let t: f64 = t_cell
            .parse()
            .map_err(|_| DsmError::parse(line, opts.time_column.as_str(), format!("cannot parse time `{t_cell}`")))?;
        if !(t.is_finite() && t > 0.0) {
            return Err(DsmError::parse(line, opts.time_column.as_str(), format!("time must be positive, got {t}")));
        }
        let l_cell = record[label_idx].trim();
        let l: usize = l_cell.parse().or_else(|_| {
            // accept integral reals such as `1.0`
            l_cell
                .parse::<f64>()
                .ok()
                .filter(|v| v.fract() == 0.0 && *v >= 0.0 && *v < 1e6)
                .map(|v| v as usize)
                .ok_or_else(|| {
                    DsmError::parse(line, opts.label_column.as_str(), format!("cannot parse event label `{l_cell}`"))
                })
        })?;
        if let Some(max) = opts.n_risks {
            if l > max {
                return Err(DsmError::parse(line, opts.label_column.as_str(), format!("label {l} exceeds {max} risks")));
            }
        }
        times.push(t);
        labels.push(l);
        for (c, &i) in feature_idx.iter().enumerate() {
            cells[c].push(record[i].trim().to_string());
        }
    }
    if times.is_empty() {
        return Err(DsmError::Empty("CSV has no data rows".into()));
    }

    let mut columns = Vec::with_capacity(feature_idx.len());
    for (c, &i) in feature_idx.iter().enumerate() {
        let name = headers[i].clone();
        let col = &cells[c];
        let parsed: Vec<Option<Option<f64>>> = col
            .iter()
            .map(|cell| {
                if is_missing(cell, opts) {
                    Some(None)
                } else {
                    cell.parse::<f64>().ok().filter(|v| v.is_finite()).map(Some)
                }
            })
            .collect();
        if parsed.iter().all(Option::is_some) {
            columns.push(RawColumn::Numeric {
                name,
                values: parsed.into_iter().map(Option::flatten).collect(),
            });
        } else {
            let mut levels: Vec<String> = Vec::new();
            let values = col
                .iter()
                .map(|cell| {
                    if is_missing(cell, opts) {
                        return None;
                    }
                    Some(match levels.iter().position(|l| l == cell) {
                        Some(p) => p,
                        None => {
                            levels.push(cell.clone());
                            levels.len() - 1
                        }
                    })
                })
                .collect();
            columns.push(RawColumn::Categorical { name, levels, values });
        }
    }
    let n_risks = opts.n_risks.unwrap_or_else(|| labels.iter().copied().max().unwrap_or(0).max(1));
    Ok(RawTable {
        columns,
        times,
        labels,
        n_risks,
    })
}

pub fn load_csv_raw(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<RawTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| DsmError::io(path, e))?;
    parse_csv_raw(std::io::BufReader::new(file), opts)
}

/// Loads a complete CSV; missing cells are an error.
pub fn load_csv(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<SurvivalDataset> {
    load_csv_raw(path, opts)?.into_dataset()
}

/// Writes the dataset with the reserved `time` and `event` columns last.
/// Reals use the shortest representation that reads back exactly.
pub fn write_csv<W: Write>(data: &SurvivalDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = data.feature_names().iter().map(String::as_str).collect();
    header.push("time");
    header.push("event");
    w.write_record(&header)?;
    let mut record: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..data.len() {
        record.clear();
        record.extend(data.row(i).iter().map(|v| v.to_string()));
        record.push(data.time(i).to_string());
        record.push(data.label(i).to_string());
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| DsmError::io("<csv writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<RawTable> {
        parse_csv_raw(text.as_bytes(), &CsvOptions::default())
    }

    #[test]
    fn small_numeric_file_verbatim() {
        let d = parse("a,b,time,event\n1,2.5,3,1\n-1,0,4.5,0\n7,8,1e-3,2\n")
            .unwrap()
            .into_dataset()
            .unwrap();
        assert_eq!(d.feature_names(), &["a", "b"]);
        assert_eq!(d.features(), &[1.0, 2.5, -1.0, 0.0, 7.0, 8.0]);
        assert_eq!(d.times(), &[3.0, 4.5, 1e-3]);
        assert_eq!(d.labels(), &[1, 0, 2]);
        assert_eq!(d.n_risks(), 2);
    }

    #[test]
    fn categorical_one_hot_in_first_appearance_order() {
        let d = parse("race,time,event\nwhite,1,1\nblack,2,0\nasian,3,1\nblack,4,1\n")
            .unwrap()
            .into_dataset()
            .unwrap();
        assert_eq!(d.feature_names(), &["race=white", "race=black", "race=asian"]);
        assert_eq!(d.row(3), &[0.0, 1.0, 0.0]);
        assert_eq!(d.row(2), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn missing_without_imputation_reports_location() {
        let err = parse("a,time,event\n1,1,1\n,2,0\n").unwrap().into_dataset().unwrap_err();
        match err {
            DsmError::Parse { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, "a");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_outcomes_are_rejected() {
        assert!(parse("a,time,event\n1,-1,1\n").is_err());
        assert!(parse("a,time,event\n1,x,1\n").is_err());
        assert!(parse("a,time,event\n1,1,-1\n").is_err());
        assert!(parse("a,time\n1,1\n").is_err());
        assert!(parse("a,time,event\n").is_err());
        assert!(parse("a,time,event\n1,2\n").is_err());
    }

    #[test]
    fn write_then_read_roundtrip() {
        let d = parse("x,y,time,event\n0.1,-2.75,3.25,1\n1e-7,12345.678,0.5,0\n")
            .unwrap()
            .into_dataset()
            .unwrap();
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        let back = parse(std::str::from_utf8(&buf).unwrap()).unwrap().into_dataset().unwrap();
        assert_eq!(back, d);
    }

    proptest! {
        #[test]
        fn roundtrip_is_exact(
            rows in proptest::collection::vec((-1e6f64..1e6, 1e-6f64..1e6, 0usize..3), 1..30),
        ) {
            let features: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let times: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let labels: Vec<usize> = rows.iter().map(|r| r.2).collect();
            let d = SurvivalDataset::new(features, 1, times, labels, vec!["f".into()], 2).unwrap();
            let mut buf = Vec::new();
            write_csv(&d, &mut buf).unwrap();
            let opts = CsvOptions { n_risks: Some(2), ..CsvOptions::default() };
            let back = parse_csv_raw(buf.as_slice(), &opts).unwrap().into_dataset().unwrap();
            prop_assert_eq!(back, d);
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
            let _ = parse_csv_raw(bytes.as_slice(), &CsvOptions::default()).map(|t| t.into_dataset());
        }
    }
}
