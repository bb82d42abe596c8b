//! Metric rows, model identifiers and the metrics CSV.

use std::fmt;
use std::path::Path;

use fracadapt::metrics::{MetricFlag, OrganMetrics};
use fracadapt::OrganLabel;

use crate::error::{CliError, Result};

pub const METRICS_HEADER: [&str; 8] = ["patient", "fraction", "model", "organ", "dsc", "msd_mm", "hd95_mm", "flags"];

/// Which model produced a prediction.
///
/// Text forms: `<variant>/base`, `<variant>/adapted/it<N>` and
/// `<variant>/cross/it<N>/M<j>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKey {
    /// The base model applied to every treatment fraction.
    Base { variant: String },
    /// `M_j` applied to fraction `j`.
    Adapted { variant: String, iterations: u64 },
    /// `M_j` of an `N`-iteration chain applied to the held-out fraction.
    Cross { variant: String, iterations: u64, model: usize },
}

impl ModelKey {
    pub fn variant(&self) -> &str {
        match self {
            ModelKey::Base { variant } | ModelKey::Adapted { variant, .. } | ModelKey::Cross { variant, .. } => variant,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let parts: Vec<&str> = s.split('/').collect();
        let iters = |p: &str| p.strip_prefix("it")?.parse::<u64>().ok();
        let variant = (*parts.first()?).to_string();
        if variant.is_empty() || variant.contains(|c: char| c.is_whitespace() || c == ',') {
            return None;
        }
        match parts[1..] {
            ["base"] => Some(ModelKey::Base { variant }),
            ["adapted", it] => Some(ModelKey::Adapted { variant, iterations: iters(it)? }),
            ["cross", it, m] => Some(ModelKey::Cross {
                variant,
                iterations: iters(it)?,
                model: m.strip_prefix('M')?.parse().ok()?,
            }),
            _ => None,
        }
    }
}

impl fmt::Display for ModelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKey::Base { variant } => write!(f, "{variant}/base"),
            ModelKey::Adapted { variant, iterations } => write!(f, "{variant}/adapted/it{iterations}"),
            ModelKey::Cross { variant, iterations, model } => write!(f, "{variant}/cross/it{iterations}/M{model}"),
        }
    }
}

/// One CSV row: the scores of one organ for one (patient, fraction, model).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub patient: String,
    pub fraction: usize,
    pub model: ModelKey,
    pub organ: OrganLabel,
    pub dsc: f64,
    /// NaN when the organ is missing from one of the maps.
    pub msd: f64,
    pub hd95: f64,
    pub flag: Option<MetricFlag>,
}

impl MetricRow {
    pub fn new(patient: &str, fraction: usize, model: &ModelKey, m: &OrganMetrics) -> Self {
        Self {
            patient: patient.to_string(),
            fraction,
            model: model.clone(),
            organ: m.organ,
            dsc: m.dsc,
            msd: m.msd,
            hd95: m.hd95,
            flag: m.flag,
        }
    }
}

/// Shortest decimal that reads back to the same `f64`; empty for NaN.
fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_path(path).map_err(CliError::runtime)?;
    w.write_record(METRICS_HEADER).map_err(CliError::runtime)?;
    for r in rows {
        w.write_record([
            r.patient.clone(),
            r.fraction.to_string(),
            r.model.to_string(),
            r.organ.name().to_string(),
            fmt_value(r.dsc),
            fmt_value(r.msd),
            fmt_value(r.hd95),
            r.flag.map(|f| f.as_str().to_string()).unwrap_or_default(),
        ])
        .map_err(CliError::runtime)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| CliError::data(path, e))?;
    let header = r.headers().map_err(|e| CliError::data(path, e))?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(CliError::data(path, format!("expected header `{}`", METRICS_HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let bad = |what: &str| CliError::data(path, format!("line {line}: {what}"));
        let rec = rec.map_err(|e| bad(&e.to_string()))?;
        let num = |k: usize, name: &str| -> Result<f64> {
            match &rec[k] {
                "" => Ok(f64::NAN),
                s => s.parse().map_err(|_| bad(&format!("bad {name} `{s}`"))),
            }
        };
        let dsc = num(4, "dsc")?;
        if !(0.0..=1.0).contains(&dsc) {
            return Err(bad("dsc must lie in [0, 1]"));
        }
        let flag = match &rec[7] {
            "" => None,
            s => Some(MetricFlag::parse(s).ok_or_else(|| bad(&format!("unknown flag `{s}`")))?),
        };
        let (msd, hd95) = (num(5, "msd_mm")?, num(6, "hd95_mm")?);
        if flag.is_none() && !(msd.is_finite() && hd95.is_finite()) {
            return Err(bad("surface distances are missing without a flag"));
        }
        rows.push(MetricRow {
            patient: rec[0].to_string(),
            fraction: rec[1].parse().map_err(|_| bad(&format!("bad fraction `{}`", &rec[1])))?,
            model: ModelKey::parse(&rec[2]).ok_or_else(|| bad(&format!("bad model id `{}`", &rec[2])))?,
            organ: OrganLabel::from_name(&rec[3])
                .filter(|o| *o != OrganLabel::Background)
                .ok_or_else(|| bad(&format!("unknown organ `{}`", &rec[3])))?,
            dsc,
            msd,
            hd95,
            flag,
        });
    }
    Ok(rows)
}
