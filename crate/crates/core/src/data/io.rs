//! Plain-text dataset, prediction, metrics and checkpoint files.
//!
//! Every real is written with Rust's shortest round-trip formatting, so
//! reading a file back reproduces every finite value bit for bit.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};

use super::{DataError, DomainDataset, Role, Sample, SampleId};
use crate::calibration::{SoftLabelSet, ROW_SUM_TOLERANCE};
use crate::model::{DomainNorm, ExtractorLayer, Linear, ModelParams, NormLayerState};

pub const CHECKPOINT_MAGIC: &str = "# swg checkpoint v1";

fn parse_err(line: usize, msg: impl Into<String>) -> DataError {
    DataError::Parse { line, msg: msg.into() }
}

fn parse_field<T: FromStr>(s: &str, line: usize, what: &str) -> Result<T, DataError> {
    s.trim()
        .parse()
        .map_err(|_| parse_err(line, format!("cannot parse {what} from {s:?}")))
}

fn parse_real(s: &str, line: usize) -> Result<f64, DataError> {
    let v: f64 = parse_field(s, line, "a real")?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("non-finite value {s:?}")));
    }
    Ok(v)
}

fn in_file(path: &Path, e: DataError) -> DataError {
    DataError::InFile {
        path: path.to_path_buf(),
        source: Box::new(e),
    }
}

fn read_text(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), DataError> {
    fs::write(path, text).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Non-empty lines with their 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn join_reals<'a>(out: &mut String, values: impl IntoIterator<Item = &'a f64>) {
    for v in values {
        let _ = write!(out, ",{v}");
    }
}

pub fn format_dataset(ds: &DomainDataset) -> String {
    let mut out = format!("id,domain,label,f:{},z:{}\n", ds.dim(), ds.num_classes());
    for s in ds.samples() {
        let label = s.label.map_or("-1".to_string(), |l| l.to_string());
        let _ = write!(out, "{},{},{label}", s.id, s.role);
        join_reals(&mut out, &s.features);
        join_reals(&mut out, &s.zeroshot);
        out.push('\n');
    }
    out
}

fn parse_header_width(field: &str, prefix: &str, line: usize) -> Result<usize, DataError> {
    let rest = field
        .strip_prefix(prefix)
        .ok_or_else(|| parse_err(line, format!("expected `{prefix}<n>` in header, found {field:?}")))?;
    parse_field(rest, line, "a width")
}

pub fn parse_dataset(text: &str) -> Result<DomainDataset, DataError> {
    let mut it = lines(text);
    let (hline, header) = it.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let h: Vec<&str> = header.split(',').map(str::trim).collect();
    if h.len() != 5 || h[..3] != ["id", "domain", "label"] {
        return Err(parse_err(hline, "header must be `id,domain,label,f:<d>,z:<K>`"));
    }
    let dim = parse_header_width(h[3], "f:", hline)?;
    let k = parse_header_width(h[4], "z:", hline)?;
    let mut ds = DomainDataset::new(dim, k);
    for (line, row) in it {
        let f: Vec<&str> = row.split(',').collect();
        let expected = 3 + dim + k;
        if f.len() != expected {
            return Err(DataError::WidthMismatch {
                line,
                expected,
                found: f.len(),
            });
        }
        let id = SampleId(parse_field(f[0], line, "a sample id")?);
        let role: Role = f[1].trim().parse().map_err(|e: String| parse_err(line, e))?;
        let label: i64 = parse_field(f[2], line, "a label")?;
        let label = match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(parse_err(line, format!("label {l} is neither -1 nor a class index"))),
        };
        let features = f[3..3 + dim].iter().map(|s| parse_real(s, line)).collect::<Result<_, _>>()?;
        let zeroshot = f[3 + dim..].iter().map(|s| parse_real(s, line)).collect::<Result<_, _>>()?;
        ds.push(Sample {
            id,
            role,
            label,
            features,
            zeroshot,
        })
        .map_err(|e| parse_err(line, e.to_string()))?;
    }
    Ok(ds)
}

pub fn write_dataset(path: &Path, ds: &DomainDataset) -> Result<(), DataError> {
    write_text(path, &format_dataset(ds))
}

pub fn read_dataset(path: &Path) -> Result<DomainDataset, DataError> {
    parse_dataset(&read_text(path)?).map_err(|e| in_file(path, e))
}

pub fn format_predictions(p: &SoftLabelSet) -> String {
    let mut out = String::from("id");
    for k in 0..p.num_classes() {
        let _ = write!(out, ",p_{k}");
    }
    out.push('\n');
    for (id, row) in p.sample_ids().iter().zip(p.probs().rows()) {
        let _ = write!(out, "{id}");
        join_reals(&mut out, row.iter());
        out.push('\n');
    }
    out
}

/// Rows are returned exactly as written; each must sum to one within
/// [`ROW_SUM_TOLERANCE`]. Callers renormalize before use.
pub fn parse_predictions(text: &str) -> Result<SoftLabelSet, DataError> {
    let mut it = lines(text);
    let (hline, header) = it.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let h: Vec<&str> = header.split(',').map(str::trim).collect();
    let k = h.len().saturating_sub(1);
    let expected_header = (0..k).map(|i| format!("p_{i}"));
    if h.first() != Some(&"id") || k == 0 || !h[1..].iter().map(|s| s.to_string()).eq(expected_header) {
        return Err(parse_err(hline, "header must be `id,p_0,...,p_<K-1>`"));
    }
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (line, row) in it {
        let f: Vec<&str> = row.split(',').collect();
        if f.len() != k + 1 {
            return Err(DataError::WidthMismatch {
                line,
                expected: k + 1,
                found: f.len(),
            });
        }
        ids.push(SampleId(parse_field(f[0], line, "a sample id")?));
        let start = values.len();
        for s in &f[1..] {
            let v = parse_real(s, line)?;
            if v < 0.0 {
                return Err(parse_err(line, format!("negative probability {v}")));
            }
            values.push(v);
        }
        let sum: f64 = values[start..].iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(parse_err(line, format!("probabilities sum to {sum}")));
        }
    }
    let probs = Array2::from_shape_vec((ids.len(), k), values).expect("row widths checked");
    SoftLabelSet::new(probs, ids, 1.0).map_err(|e| parse_err(hline, e.to_string()))
}

pub fn write_predictions(path: &Path, p: &SoftLabelSet) -> Result<(), DataError> {
    write_text(path, &format_predictions(p))
}

pub fn read_predictions(path: &Path) -> Result<SoftLabelSet, DataError> {
    parse_predictions(&read_text(path)?).map_err(|e| in_file(path, e))
}

/// One line of a metrics file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeMetrics {
    pub run: usize,
    pub episode: usize,
    pub l_ce: f64,
    pub l_kd: f64,
    pub l_ad: f64,
    /// `None` when the target set carries no labels.
    pub target_accuracy: Option<f64>,
}

impl EpisodeMetrics {
    pub fn to_line(&self) -> String {
        let acc = self.target_accuracy.map_or("none".to_string(), |a| a.to_string());
        format!(
            "run={} episode={} l_ce={} l_kd={} l_ad={} target_accuracy={acc}",
            self.run, self.episode, self.l_ce, self.l_kd, self.l_ad
        )
    }
}

pub fn format_metrics(records: &[EpisodeMetrics]) -> String {
    records.iter().map(|r| r.to_line() + "\n").collect()
}

pub fn parse_metrics(text: &str) -> Result<Vec<EpisodeMetrics>, DataError> {
    let mut out = Vec::new();
    for (line, row) in lines(text) {
        let mut kv = HashMap::new();
        for pair in row.split_whitespace() {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| parse_err(line, format!("expected key=value, found {pair:?}")))?;
            kv.insert(k, v);
        }
        let get = |key: &str| {
            kv.get(key)
                .copied()
                .ok_or_else(|| parse_err(line, format!("missing key {key}")))
        };
        out.push(EpisodeMetrics {
            run: parse_field(get("run")?, line, "run")?,
            episode: parse_field(get("episode")?, line, "episode")?,
            l_ce: parse_real(get("l_ce")?, line)?,
            l_kd: parse_real(get("l_kd")?, line)?,
            l_ad: parse_real(get("l_ad")?, line)?,
            target_accuracy: match get("target_accuracy")? {
                "none" => None,
                v => Some(parse_real(v, line)?),
            },
        });
    }
    Ok(out)
}

pub fn write_metrics(path: &Path, records: &[EpisodeMetrics]) -> Result<(), DataError> {
    write_text(path, &format_metrics(records))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpisodeMetrics>, DataError> {
    parse_metrics(&read_text(path)?).map_err(|e| in_file(path, e))
}

fn push_array(out: &mut String, name: &str, rows: usize, cols: usize, values: &[f64]) {
    let _ = writeln!(out, "array {name} {rows} {cols}");
    for r in 0..rows {
        let row = &values[r * cols..(r + 1) * cols];
        let text: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&text.join(","));
        out.push('\n');
    }
}

fn push_matrix(out: &mut String, name: &str, m: &Array2<f64>) {
    let values: Vec<f64> = m.iter().copied().collect();
    push_array(out, name, m.nrows(), m.ncols(), &values);
}

fn push_vector(out: &mut String, name: &str, v: &Array1<f64>) {
    push_array(out, name, 1, v.len(), v.as_slice().expect("standard layout"));
}

/// Every array of `params`, running statistics included.
pub fn format_checkpoint(params: &ModelParams) -> String {
    let mut out = format!("{CHECKPOINT_MAGIC}\n");
    for (i, l) in params.extractor.iter().enumerate() {
        push_matrix(&mut out, &format!("extractor.{i}.weight"), &l.linear.weight);
        push_matrix(&mut out, &format!("extractor.{i}.bias"), &l.linear.bias);
        for (d, st) in [("source", &l.norm.source), ("target", &l.norm.target)] {
            push_vector(&mut out, &format!("extractor.{i}.norm.{d}.gamma"), &st.gamma);
            push_vector(&mut out, &format!("extractor.{i}.norm.{d}.beta"), &st.beta);
            push_vector(&mut out, &format!("extractor.{i}.norm.{d}.mean"), &st.running_mean);
            push_vector(&mut out, &format!("extractor.{i}.norm.{d}.var"), &st.running_var);
        }
    }
    push_matrix(&mut out, "classifier.weight", &params.classifier.weight);
    push_matrix(&mut out, "classifier.bias", &params.classifier.bias);
    for (i, l) in params.discriminator.iter().enumerate() {
        push_matrix(&mut out, &format!("discriminator.{i}.weight"), &l.weight);
        push_matrix(&mut out, &format!("discriminator.{i}.bias"), &l.bias);
    }
    out
}

pub fn parse_checkpoint(text: &str) -> Result<ModelParams, DataError> {
    let mut it = lines(text).peekable();
    match it.next() {
        Some((_, l)) if l.trim() == CHECKPOINT_MAGIC => {}
        Some((line, _)) => return Err(parse_err(line, format!("expected `{CHECKPOINT_MAGIC}`"))),
        None => return Err(parse_err(1, "empty file")),
    }
    let mut arrays: HashMap<String, Array2<f64>> = HashMap::new();
    while let Some((line, head)) = it.next() {
        let parts: Vec<&str> = head.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "array" {
            return Err(parse_err(line, "expected `array <name> <rows> <cols>`"));
        }
        let name = parts[1].to_string();
        let rows: usize = parse_field(parts[2], line, "a row count")?;
        let cols: usize = parse_field(parts[3], line, "a column count")?;
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (rline, row) = it
                .next()
                .ok_or_else(|| parse_err(line, format!("{name}: file ends before {rows} rows")))?;
            let f: Vec<&str> = row.split(',').collect();
            if f.len() != cols {
                return Err(DataError::WidthMismatch {
                    line: rline,
                    expected: cols,
                    found: f.len(),
                });
            }
            for s in f {
                values.push(parse_real(s, rline)?);
            }
        }
        let m = Array2::from_shape_vec((rows, cols), values).expect("row widths checked");
        if arrays.insert(name.clone(), m).is_some() {
            return Err(parse_err(line, format!("array {name} appears twice")));
        }
    }
    let params = assemble(&mut arrays)?;
    if let Some(extra) = arrays.keys().min() {
        return Err(parse_err(0, format!("unexpected array {extra}")));
    }
    params.validate().map_err(|e| parse_err(0, e.to_string()))?;
    Ok(params)
}

fn assemble(arrays: &mut HashMap<String, Array2<f64>>) -> Result<ModelParams, DataError> {
    let mut take = |name: String| arrays.remove(&name).ok_or_else(|| parse_err(0, format!("missing array {name}")));
    let vector = |m: Array2<f64>, name: &str| -> Result<Array1<f64>, DataError> {
        if m.nrows() != 1 {
            return Err(parse_err(0, format!("{name} must have one row")));
        }
        Ok(m.row(0).to_owned())
    };
    let mut extractor = Vec::new();
    let mut i = 0;
    loop {
        let weight = match take(format!("extractor.{i}.weight")) {
            Ok(w) => w,
            Err(_) => break,
        };
        let bias = take(format!("extractor.{i}.bias"))?;
        let mut state = |d: &str| -> Result<NormLayerState, DataError> {
            let mut field = |f: &str| {
                let name = format!("extractor.{i}.norm.{d}.{f}");
                take(name.clone()).and_then(|m| vector(m, &name))
            };
            Ok(NormLayerState {
                gamma: field("gamma")?,
                beta: field("beta")?,
                running_mean: field("mean")?,
                running_var: field("var")?,
            })
        };
        let norm = DomainNorm {
            source: state("source")?,
            target: state("target")?,
        };
        extractor.push(ExtractorLayer {
            linear: Linear { weight, bias },
            norm,
        });
        i += 1;
    }
    let classifier = Linear {
        weight: take("classifier.weight".into())?,
        bias: take("classifier.bias".into())?,
    };
    let mut discriminator = Vec::new();
    let mut j = 0;
    while let Ok(weight) = take(format!("discriminator.{j}.weight")) {
        let bias = take(format!("discriminator.{j}.bias"))?;
        discriminator.push(Linear { weight, bias });
        j += 1;
    }
    if discriminator.is_empty() {
        return Err(parse_err(0, "missing array discriminator.0.weight"));
    }
    Ok(ModelParams {
        extractor,
        classifier,
        discriminator,
    })
}

pub fn write_checkpoint(path: &Path, params: &ModelParams) -> Result<(), DataError> {
    write_text(path, &format_checkpoint(params))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams, DataError> {
    parse_checkpoint(&read_text(path)?).map_err(|e| in_file(path, e))
}
