//! Aggregation of metric rows into tables, significance tests and the data
//! behind the per-session MSD figure.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use fracadapt::metrics::{wilcoxon_signed_rank, WilcoxonResult};
use fracadapt::OrganLabel;

use crate::config::Pairing;
use crate::error::{CliError, Result};
use crate::records::{MetricRow, ModelKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Dsc,
    Msd,
    Hd95,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Dsc, Metric::Msd, Metric::Hd95];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dsc => "DSC",
            Metric::Msd => "MSD (mm)",
            Metric::Hd95 => "HD95 (mm)",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Metric::Dsc => "dsc",
            Metric::Msd => "msd_mm",
            Metric::Hd95 => "hd95_mm",
        }
    }

    /// The row's value; NaN (skipped) for surface metrics of flagged rows.
    /// A flagged DSC counts as its recorded 0.
    pub fn value(self, r: &MetricRow) -> f64 {
        match self {
            Metric::Dsc => r.dsc,
            Metric::Msd => r.msd,
            Metric::Hd95 => r.hd95,
        }
    }

    fn decimals(self) -> usize {
        match self {
            Metric::Dsc => 3,
            _ => 2,
        }
    }
}

/// Mean and population standard deviation of the finite values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

pub fn stats(values: impl IntoIterator<Item = f64>) -> Option<Stats> {
    let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some(Stats { n: v.len(), mean, sd: var.sqrt() })
}

/// Marker of a base-versus-proposed comparison, from the variant name.
pub fn marker(variant: &str) -> &'static str {
    match variant {
        "base_a" => "†",
        "base_b" => "‡",
        _ => "*",
    }
}

fn row_label(key: &ModelKey) -> String {
    match key {
        ModelKey::Base { variant } => variant.clone(),
        ModelKey::Adapted { variant, iterations } => {
            let suffix = variant.strip_prefix("base_").unwrap_or(variant);
            format!("proposed_{suffix} it{iterations}")
        }
        ModelKey::Cross { .. } => key.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub model: ModelKey,
    pub label: String,
    /// `cells[metric][organ]` in [`Metric::ALL`] and [`OrganLabel::ORGANS`] order.
    pub cells: [[Option<Stats>; 4]; 3],
}

/// Signed-rank test of one proposed row against its base row.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub metric: Metric,
    pub organ: OrganLabel,
    pub variant: String,
    pub iterations: u64,
    pub pairs: usize,
    /// `None` when there are no pairs or every difference is zero.
    pub test: Option<WilcoxonResult>,
}

impl Comparison {
    pub fn significant(&self, alpha: f64) -> bool {
        self.test.is_some_and(|t| t.p_value < alpha)
    }
}

/// Per-patient MSD of every model in one chain on the held-out fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSet {
    pub variant: String,
    pub iterations: u64,
    pub fraction: usize,
    /// Chain positions `j` present, ascending.
    pub models: Vec<usize>,
    /// `msd[organ][k]` holds the per-patient values of `models[k]`.
    pub msd: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<TableRow>,
    pub comparisons: Vec<Comparison>,
    pub cross: Vec<CrossSet>,
    pub pairing: Pairing,
    pub alpha: f64,
}

fn organ_index(o: OrganLabel) -> usize {
    o.code() as usize - 1
}

/// Values paired by (patient, fraction) or, for per-patient pairing, by the
/// patient means over fractions. Only pairs finite on both sides are kept.
fn pairs(base: &[&MetricRow], proposed: &[&MetricRow], metric: Metric, pairing: Pairing) -> (Vec<f64>, Vec<f64>) {
    let index = |rows: &[&MetricRow]| -> BTreeMap<(String, usize), f64> {
        let mut m = BTreeMap::new();
        for r in rows {
            let v = metric.value(r);
            if v.is_finite() {
                m.insert((r.patient.clone(), r.fraction), v);
            }
        }
        m
    };
    let (b, p) = (index(base), index(proposed));
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    match pairing {
        Pairing::Fraction => {
            for (k, &pv) in &p {
                if let Some(&bv) = b.get(k) {
                    xs.push(pv);
                    ys.push(bv);
                }
            }
        }
        Pairing::Patient => {
            let means = |m: &BTreeMap<(String, usize), f64>| {
                let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
                for ((patient, _), v) in m {
                    let e = acc.entry(patient.clone()).or_default();
                    e.0 += v;
                    e.1 += 1;
                }
                acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect::<BTreeMap<_, _>>()
            };
            let (bm, pm) = (means(&b), means(&p));
            for (k, &pv) in &pm {
                if let Some(&bv) = bm.get(k) {
                    xs.push(pv);
                    ys.push(bv);
                }
            }
        }
    }
    (xs, ys)
}

impl Report {
    pub fn build(rows: &[MetricRow], pairing: Pairing, alpha: f64) -> Result<Report> {
        if rows.is_empty() {
            return Err(CliError::Data("the metrics table holds no rows".into()));
        }
        let mut groups: BTreeMap<(ModelKey, OrganLabel), Vec<&MetricRow>> = BTreeMap::new();
        for r in rows {
            groups.entry((r.model.clone(), r.organ)).or_default().push(r);
        }
        let mut keys: Vec<ModelKey> = groups
            .keys()
            .map(|(k, _)| k.clone())
            .filter(|k| !matches!(k, ModelKey::Cross { .. }))
            .collect();
        keys.dedup();
        // each variant's base row first, then its proposed rows by iterations
        keys.sort_by_key(|k| match k {
            ModelKey::Adapted { variant, iterations } => (variant.clone(), 1, *iterations),
            _ => (k.variant().to_string(), 0, 0),
        });
        for k in &keys {
            if let ModelKey::Adapted { variant, .. } = k {
                let base = ModelKey::Base { variant: variant.clone() };
                if !keys.contains(&base) {
                    return Err(CliError::Data(format!("rows for `{k}` have no matching `{base}` rows")));
                }
            }
        }

        let empty = Vec::new();
        let group = |k: &ModelKey, o: OrganLabel| groups.get(&(k.clone(), o)).unwrap_or(&empty);
        let table_rows = keys
            .iter()
            .map(|k| {
                let mut cells = [[None; 4]; 3];
                for (mi, m) in Metric::ALL.into_iter().enumerate() {
                    for o in OrganLabel::ORGANS {
                        cells[mi][organ_index(o)] = stats(group(k, o).iter().map(|r| m.value(r)));
                    }
                }
                TableRow { model: k.clone(), label: row_label(k), cells }
            })
            .collect();

        let mut comparisons = Vec::new();
        for k in &keys {
            let ModelKey::Adapted { variant, iterations } = k else { continue };
            let base = ModelKey::Base { variant: variant.clone() };
            for m in Metric::ALL {
                for o in OrganLabel::ORGANS {
                    let (xs, ys) = pairs(group(&base, o), group(k, o), m, pairing);
                    comparisons.push(Comparison {
                        metric: m,
                        organ: o,
                        variant: variant.clone(),
                        iterations: *iterations,
                        pairs: xs.len(),
                        test: wilcoxon_signed_rank(&xs, &ys).ok(),
                    });
                }
            }
        }

        let mut cross_groups: BTreeMap<(String, u64, usize), BTreeMap<usize, [BTreeMap<String, f64>; 4]>> = BTreeMap::new();
        for r in rows {
            if let ModelKey::Cross { variant, iterations, model } = &r.model {
                let per_model = cross_groups.entry((variant.clone(), *iterations, r.fraction)).or_default();
                let organs = per_model.entry(*model).or_default();
                if r.msd.is_finite() {
                    organs[organ_index(r.organ)].insert(r.patient.clone(), r.msd);
                }
            }
        }
        let cross = cross_groups
            .into_iter()
            .map(|((variant, iterations, fraction), per_model)| {
                let models: Vec<usize> = per_model.keys().copied().collect();
                let msd = (0..4)
                    .map(|o| per_model.values().map(|organs| organs[o].values().copied().collect()).collect())
                    .collect();
                CrossSet { variant, iterations, fraction, models, msd }
            })
            .collect();

        Ok(Report { rows: table_rows, comparisons, cross, pairing, alpha })
    }

    pub fn comparison(&self, metric: Metric, organ: OrganLabel, variant: &str, iterations: u64) -> Option<&Comparison> {
        self.comparisons
            .iter()
            .find(|c| c.metric == metric && c.organ == organ && c.variant == variant && c.iterations == iterations)
    }

    pub fn row(&self, key: &ModelKey) -> Option<&TableRow> {
        self.rows.iter().find(|r| &r.model == key)
    }

    /// The three text tables, mean ± population sd per organ, with markers
    /// on proposed cells that differ significantly from their base row.
    pub fn render_tables(&self) -> String {
        let label_w = self.rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(5).max(5) + 2;
        let cell_w = 20;
        let variants: Vec<&str> = {
            let mut v: Vec<&str> = self.comparisons.iter().map(|c| c.variant.as_str()).collect();
            v.dedup();
            v
        };
        let legend = variants
            .iter()
            .map(|v| format!("{} {v} vs proposed", marker(v)))
            .collect::<Vec<_>>()
            .join("; ");
        let mut s = String::new();
        for (mi, m) in Metric::ALL.into_iter().enumerate() {
            let _ = writeln!(s, "{}: mean ± sd over fraction-level values", m.name());
            if !legend.is_empty() {
                let _ = writeln!(
                    s,
                    "markers: {legend}; Wilcoxon signed-rank p < {}, {} pairs",
                    self.alpha, self.pairing
                );
            }
            let _ = write!(s, "{:<label_w$}", "model");
            for o in OrganLabel::ORGANS {
                let _ = write!(s, "{:<cell_w$}", o.name());
            }
            s = s.trim_end().to_string();
            s.push('\n');
            for row in &self.rows {
                let mut line = format!("{:<label_w$}", row.label);
                for o in OrganLabel::ORGANS {
                    let mut cell = match row.cells[mi][organ_index(o)] {
                        Some(st) => format!("{:.*} ± {:.*}", m.decimals(), st.mean, m.decimals(), st.sd),
                        None => "-".to_string(),
                    };
                    if let ModelKey::Adapted { variant, iterations } = &row.model {
                        if self
                            .comparison(m, o, variant, *iterations)
                            .is_some_and(|c| c.significant(self.alpha))
                        {
                            cell.push(' ');
                            cell.push_str(marker(variant));
                        }
                    }
                    let pad = cell_w.saturating_sub(cell.chars().count());
                    line.push_str(&cell);
                    line.push_str(&" ".repeat(pad));
                }
                s.push_str(line.trim_end());
                s.push('\n');
            }
            s.push('\n');
        }
        s
    }

    /// Every table cell at full precision.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("metric,model,organ,n,mean,sd\n");
        for m in Metric::ALL {
            for row in &self.rows {
                for o in OrganLabel::ORGANS {
                    if let Some(st) = row.cells[m as usize][organ_index(o)] {
                        let _ = writeln!(s, "{},{},{},{},{},{}", m.key(), row.model, o.name(), st.n, st.mean, st.sd);
                    }
                }
            }
        }
        s
    }

    pub fn significance_csv(&self) -> String {
        let mut s = String::from("metric,organ,base,proposed,pairing,pairs,n_nonzero,w_plus,w_minus,p_value,method,significant\n");
        for c in &self.comparisons {
            let base = ModelKey::Base { variant: c.variant.clone() };
            let prop = ModelKey::Adapted { variant: c.variant.clone(), iterations: c.iterations };
            let _ = write!(s, "{},{},{base},{prop},{},{},", c.metric.key(), c.organ.name(), self.pairing, c.pairs);
            match c.test {
                Some(t) => {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{}",
                        t.n,
                        t.w_plus,
                        t.w_minus,
                        t.p_value,
                        t.method.as_str(),
                        c.significant(self.alpha)
                    );
                }
                None => s.push_str("0,,,,,false\n"),
            }
        }
        s
    }
}
