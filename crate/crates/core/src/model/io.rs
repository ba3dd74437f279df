//! Plain-text model files.
//!
//! ```text
//! dsm-model 1
//! family weibull
//! k 4
//! risks 2
//! input_dim 12
//! hidden 50,50
//! alpha 1e0
//! lambda 0e0
//! time_scale 1.2345e0
//! feature x1_1
//! ...
//! anchor 1 <log_shape> <log_scale>
//! param <name> <rows> <cols> <values...>
//! end
//! ```
//!
//! Floats are written with `{:e}`, which round-trips exactly. Feature names
//! are escaped (`\\`, `\n`, `\r`) and occupy the rest of their line.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DsmModel, ModelConfig};
use crate::distributions::PrimitiveParams;
use crate::error::{DsmError, Result};
use crate::gradcore::LayerSpec;

const MAGIC: &str = "dsm-model";
const VERSION: u32 = 1;
/// Refuse files that would allocate more than this many parameters.
const MAX_PARAMS: usize = 50_000_000;

fn escape(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for ch in name.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(text: &str, line: usize) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => {
                return Err(DsmError::parse(line, "feature", format!("bad escape `\\{}`", other.map(String::from).unwrap_or_default())))
            }
        }
    }
    Ok(out)
}

/// Serialises a model.
pub fn write_model<W: Write>(model: &DsmModel, mut w: W) -> Result<()> {
    let cfg = model.config();
    let mut text = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(text, "{MAGIC} {VERSION}");
    let _ = writeln!(text, "family {}", cfg.family);
    let _ = writeln!(text, "k {}", cfg.k);
    let _ = writeln!(text, "risks {}", cfg.risks);
    let _ = writeln!(text, "input_dim {}", cfg.layers.input_dim);
    let hidden: Vec<String> = cfg.layers.hidden.iter().map(|h| h.to_string()).collect();
    let _ = writeln!(text, "hidden {}", hidden.join(","));
    let _ = writeln!(text, "alpha {:e}", cfg.alpha);
    let _ = writeln!(text, "lambda {:e}", cfg.lambda);
    let _ = writeln!(text, "time_scale {:e}", model.time_scale());
    for name in model.feature_names() {
        let _ = writeln!(text, "feature {}", escape(name));
    }
    for (m, a) in model.anchors().iter().enumerate() {
        let _ = writeln!(text, "anchor {} {:e} {:e}", m + 1, a.log_shape, a.log_scale);
    }
    let store = model.store();
    for id in store.ids() {
        let (rows, cols) = store.shape(id);
        let _ = write!(text, "param {} {rows} {cols}", store.name(id));
        for v in store.value(id) {
            let _ = write!(text, " {v:e}");
        }
        text.push('\n');
    }
    text.push_str("end\n");
    w.write_all(text.as_bytes()).map_err(|e| DsmError::io("<model writer>", e))
}

/// Writes a model to `path` atomically (temporary file, then rename).
pub fn save_model(model: &DsmModel, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let file = fs::File::create(&tmp).map_err(|e| DsmError::io(&tmp, e))?;
    write_model(model, std::io::BufWriter::new(file))?;
    fs::rename(&tmp, path).map_err(|e| DsmError::io(path, e))
}

pub fn read_model(path: &Path) -> Result<DsmModel> {
    let text = fs::read_to_string(path).map_err(|e| DsmError::io(path, e))?;
    parse_model(&text)
}

#[derive(Default)]
struct Header {
    family: Option<crate::distributions::PrimitiveFamily>,
    k: Option<usize>,
    risks: Option<usize>,
    input_dim: Option<usize>,
    hidden: Option<Vec<usize>>,
    alpha: Option<f64>,
    lambda: Option<f64>,
    time_scale: Option<f64>,
}

fn field<T: std::str::FromStr>(value: &str, line: usize, key: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| DsmError::parse(line, key, format!("cannot parse `{}`", value.trim())))
}

fn set_once<T>(slot: &mut Option<T>, value: T, line: usize, key: &str) -> Result<()> {
    if slot.is_some() {
        return Err(DsmError::parse(line, key, "duplicate field"));
    }
    *slot = Some(value);
    Ok(())
}

fn require<T: Clone>(slot: &Option<T>, key: &str, line: usize) -> Result<T> {
    slot.clone()
        .ok_or_else(|| DsmError::parse(line, key, format!("missing `{key}` before parameters")))
}

/// Parameter count implied by a header, or `None` on overflow.
fn implied_params(input_dim: usize, hidden: &[usize], k: usize, risks: usize) -> Option<usize> {
    let mut total = 0usize;
    let mut fan_in = input_dim;
    for &h in hidden {
        total = total.checked_add(h.checked_mul(fan_in)?.checked_add(h)?)?;
        fan_in = h;
    }
    let per_risk = k.checked_mul(3)?.checked_mul(fan_in)?.checked_add(k.checked_mul(2)?)?;
    total.checked_add(per_risk.checked_mul(risks)?)
}

fn build(header: &Header, features: Vec<String>, line: usize) -> Result<DsmModel> {
    let family = require(&header.family, "family", line)?;
    let k = require(&header.k, "k", line)?;
    let risks = require(&header.risks, "risks", line)?;
    let input_dim = require(&header.input_dim, "input_dim", line)?;
    let hidden = require(&header.hidden, "hidden", line)?;
    let alpha = require(&header.alpha, "alpha", line)?;
    let lambda = require(&header.lambda, "lambda", line)?;
    let time_scale = require(&header.time_scale, "time_scale", line)?;
    match implied_params(input_dim, &hidden, k, risks) {
        Some(n) if n <= MAX_PARAMS => {}
        _ => return Err(DsmError::parse(line, "param", "model is too large")),
    }
    let config = ModelConfig {
        family,
        k,
        risks,
        layers: LayerSpec::new(input_dim, hidden),
        alpha,
        lambda,
    };
    let mut model = DsmModel::new(config, features).map_err(|e| DsmError::parse(line, "header", e.to_string()))?;
    model
        .set_time_scale(time_scale)
        .map_err(|e| DsmError::parse(line, "time_scale", e.to_string()))?;
    Ok(model)
}

/// Parses a model file. Never panics on malformed input.
pub fn parse_model(text: &str) -> Result<DsmModel> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)));
    match lines.next() {
        Some((_, first)) if first.split_whitespace().eq([MAGIC, "1"]) => {}
        Some((_, first)) if first.starts_with(MAGIC) => {
            return Err(DsmError::parse(1, "version", format!("unsupported header `{first}`")))
        }
        _ => return Err(DsmError::parse(1, "header", format!("expected `{MAGIC} {VERSION}`"))),
    }

    let mut header = Header::default();
    let mut features: Vec<String> = Vec::new();
    let mut anchors: Vec<Option<PrimitiveParams>> = Vec::new();
    let mut model: Option<DsmModel> = None;
    let mut seen_params = BTreeSet::new();
    let mut last_line = 1;
    let mut ended = false;

    for (n, line) in lines.by_ref() {
        last_line = n;
        if line.trim().is_empty() {
            continue;
        }
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        if model.is_some() && !matches!(key, "param" | "end") {
            return Err(DsmError::parse(n, key, "header field after parameters"));
        }
        match key {
            "family" => set_once(&mut header.family, field(rest, n, key)?, n, key)?,
            "k" => set_once(&mut header.k, field(rest, n, key)?, n, key)?,
            "risks" => set_once(&mut header.risks, field(rest, n, key)?, n, key)?,
            "input_dim" => set_once(&mut header.input_dim, field(rest, n, key)?, n, key)?,
            "hidden" => {
                let widths = rest
                    .split(',')
                    .map(|w| field::<usize>(w, n, key))
                    .collect::<Result<Vec<_>>>()?;
                set_once(&mut header.hidden, widths, n, key)?
            }
            "alpha" => set_once(&mut header.alpha, field(rest, n, key)?, n, key)?,
            "lambda" => set_once(&mut header.lambda, field(rest, n, key)?, n, key)?,
            "time_scale" => set_once(&mut header.time_scale, field(rest, n, key)?, n, key)?,
            "feature" => {
                if features.len() >= MAX_PARAMS {
                    return Err(DsmError::parse(n, key, "too many features"));
                }
                features.push(unescape(rest, n)?)
            }
            "anchor" => {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let [risk, shape, scale] = parts[..] else {
                    return Err(DsmError::parse(n, key, "expected `anchor <risk> <log_shape> <log_scale>`"));
                };
                let risk: usize = field(risk, n, key)?;
                let p = PrimitiveParams::new(field(shape, n, key)?, field(scale, n, key)?);
                if !(p.log_shape.is_finite() && p.log_scale.is_finite()) {
                    return Err(DsmError::parse(n, key, "non-finite anchor"));
                }
                if risk == 0 || risk > 1_000_000 {
                    return Err(DsmError::parse(n, key, format!("bad risk index {risk}")));
                }
                if anchors.len() < risk {
                    anchors.resize(risk, None);
                }
                if anchors[risk - 1].replace(p).is_some() {
                    return Err(DsmError::parse(n, key, format!("duplicate anchor for risk {risk}")));
                }
            }
            "param" => {
                if model.is_none() {
                    model = Some(build(&header, std::mem::take(&mut features), n)?);
                }
                let m = model.as_mut().expect("just built");
                let mut parts = rest.split_whitespace();
                let name = parts.next().ok_or_else(|| DsmError::parse(n, key, "missing name"))?;
                let id = m
                    .store()
                    .id(name)
                    .ok_or_else(|| DsmError::parse(n, "name", format!("unknown parameter `{name}`")))?;
                if !seen_params.insert(name.to_string()) {
                    return Err(DsmError::parse(n, "name", format!("duplicate parameter `{name}`")));
                }
                let rows: usize = field(parts.next().unwrap_or(""), n, "rows")?;
                let cols: usize = field(parts.next().unwrap_or(""), n, "cols")?;
                if m.store().shape(id) != (rows, cols) {
                    return Err(DsmError::parse(
                        n,
                        "shape",
                        format!("`{name}` is {:?}, file says ({rows}, {cols})", m.store().shape(id)),
                    ));
                }
                let slot = m.store_mut().value_mut(id);
                let mut count = 0;
                for (i, tok) in parts.enumerate() {
                    if i >= slot.len() {
                        return Err(DsmError::parse(n, name, "too many values"));
                    }
                    let v: f64 = field(tok, n, name)?;
                    if !v.is_finite() {
                        return Err(DsmError::parse(n, name, format!("non-finite value `{tok}`")));
                    }
                    slot[i] = v;
                    count += 1;
                }
                if count != slot.len() {
                    return Err(DsmError::parse(n, name, format!("expected {} values, found {count}", slot.len())));
                }
            }
            "end" => {
                ended = true;
                break;
            }
            other => return Err(DsmError::parse(n, other, format!("unknown field `{other}`"))),
        }
    }
    if !ended {
        return Err(DsmError::parse(last_line, "end", "missing `end`"));
    }
    if let Some((n, _)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(DsmError::parse(n, "end", "content after `end`"));
    }
    let mut model = match model {
        Some(m) => m,
        None => build(&header, features, last_line)?,
    };
    if seen_params.len() != model.store().ids().count() {
        let missing = model
            .store()
            .ids()
            .map(|id| model.store().name(id).to_string())
            .find(|name| !seen_params.contains(name))
            .unwrap_or_default();
        return Err(DsmError::parse(last_line, "param", format!("missing parameter `{missing}`")));
    }
    if anchors.len() != model.risks() || anchors.iter().any(Option::is_none) {
        return Err(DsmError::parse(last_line, "anchor", format!("expected one anchor per risk ({})", model.risks())));
    }
    model.set_anchors(anchors.into_iter().flatten().collect())?;
    Ok(model)
}
