//! The experiment stages behind each subcommand.
//!
//! Layout under the output directory:
//!
//! ```text
//! cohort/<profile>/...                      generated cohorts
//! models/<variant>/{base.ckpt,loss.csv}     base models
//! traces/<variant>/base/<patient>/pred_<j>.mha
//! traces/<variant>/it<N>/<patient>/         adaptation trace, plus
//!     cross_f<k>_M<j>.mha                   M_j applied to held-out fraction k
//! metrics.csv
//! report/
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use fracadapt::adapt::{self, run_series};
use fracadapt::metrics::{self, evaluate_pair};
use fracadapt::phantom::{self, generate_cohort, read_cohort, write_cohort, CohortConfig, FractionSeries};
use fracadapt::segnet::{self, predict_volume, ModelCheckpoint};
use fracadapt::trainer::{self, train_base};
use fracadapt::volume;
use fracadapt::{LabelMap3, OrganLabel, Volume3};

use crate::config::{PatientFilter, Settings};
use crate::error::{CliError, Result};
use crate::figures;
use crate::records::{read_metrics_csv, write_metrics_csv, MetricRow, ModelKey};
use crate::report::Report;

pub fn checkpoint_path(out: &Path, variant: &str) -> PathBuf {
    out.join("models").join(variant).join("base.ckpt")
}

pub fn loss_path(out: &Path, variant: &str) -> PathBuf {
    out.join("models").join(variant).join("loss.csv")
}

pub fn base_prediction_dir(out: &Path, variant: &str, patient: &str) -> PathBuf {
    out.join("traces").join(variant).join("base").join(patient)
}

pub fn trace_dir(out: &Path, variant: &str, iterations: u64, patient: &str) -> PathBuf {
    out.join("traces").join(variant).join(format!("it{iterations}")).join(patient)
}

pub fn cross_path(trace: &Path, fraction: usize, model: usize) -> PathBuf {
    trace.join(format!("cross_f{fraction}_M{model}.mha"))
}

pub fn metrics_path(out: &Path) -> PathBuf {
    out.join("metrics.csv")
}

pub fn report_dir(out: &Path) -> PathBuf {
    out.join("report")
}

fn progress(msg: impl AsRef<str>) {
    eprintln!("[fracadapt] {}", msg.as_ref());
}

/// Which cohorts `gen-cohort` writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Institutes {
    A,
    B,
    Both,
}

impl Institutes {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "a" | "institute-a" => Ok(Institutes::A),
            "b" | "institute-b" => Ok(Institutes::B),
            "both" => Ok(Institutes::Both),
            _ => Err(CliError::Config(format!("--institute must be a, b or both, got `{s}`"))),
        }
    }
}

fn write_one_cohort(dir: &Path, cfg: &CohortConfig) -> Result<()> {
    let cohort = generate_cohort(cfg).map_err(CliError::config)?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| CliError::runtime(format!("cannot replace {}: {e}", dir.display())))?;
    }
    write_cohort(dir, cfg, &cohort).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", dir.display())))?;
    progress(format!(
        "wrote {} patients x {} scans to {}",
        cfg.patients,
        cfg.fractions,
        dir.display()
    ));
    Ok(())
}

pub fn gen_cohort(s: &Settings, which: Institutes) -> Result<()> {
    if let PatientFilter::Ids(_) = s.patients {
        return Err(CliError::Config("gen-cohort takes a patient count, not ids".into()));
    }
    if which != Institutes::B {
        write_one_cohort(&s.cohort_a_dir, &s.cohort_a)?;
    }
    if which != Institutes::A {
        write_one_cohort(&s.cohort_b_dir, &s.cohort_b)?;
    }
    Ok(())
}

/// Reads a cohort, keeps the admitted patients and resamples every scan.
pub fn load_cohort(dir: &Path, spacing: [f64; 3], filter: &PatientFilter) -> Result<Vec<FractionSeries>> {
    if !dir.join(phantom::MANIFEST).is_file() {
        return Err(CliError::data(dir, "cohort not found (run gen-cohort first)"));
    }
    let cohort = read_cohort(dir).map_err(|e| CliError::data(dir, e))?;
    let kept: Vec<FractionSeries> = cohort
        .into_iter()
        .enumerate()
        .filter(|(i, s)| filter.admits(*i, &s.patient_id))
        .map(|(_, s)| s)
        .collect();
    if kept.is_empty() {
        return Err(CliError::data(dir, "no patient matches the selection"));
    }
    if let PatientFilter::Ids(ids) = filter {
        if let Some(missing) = ids.iter().find(|id| !kept.iter().any(|s| &s.patient_id == *id)) {
            return Err(CliError::data(dir, format!("patient `{missing}` not found")));
        }
    }
    kept.iter()
        .map(|s| s.resampled(spacing).map_err(|e| CliError::data(dir, e)))
        .collect()
}

fn load_base(out: &Path, variant: &str) -> Result<ModelCheckpoint> {
    let path = checkpoint_path(out, variant);
    if !path.is_file() {
        return Err(CliError::data(&path, "base checkpoint not found (run train-base first)"));
    }
    segnet::load_checkpoint(&path).map_err(|e| CliError::data(&path, e))
}

pub fn train(s: &Settings) -> Result<()> {
    let cohort = load_cohort(&s.cohort_a_dir, s.spacing, &PatientFilter::All)?;
    for v in &s.variants {
        let start = Instant::now();
        let outcome = train_base(&cohort, &v.spec, &s.train).map_err(CliError::runtime)?;
        let path = checkpoint_path(&s.out, &v.name);
        fs::create_dir_all(path.parent().unwrap())?;
        segnet::save_checkpoint(&outcome.checkpoint.model, &outcome.checkpoint.meta, &path).map_err(CliError::runtime)?;
        fs::write(loss_path(&s.out, &v.name), trainer::loss_csv(&outcome.curve))?;
        let last = outcome.curve.last().map(|r| format!(", final train loss {:.4}", r.train_loss)).unwrap_or_default();
        progress(format!(
            "trained {} for {} iterations in {:.1?}{last}",
            v.name,
            s.train.iterations,
            start.elapsed()
        ));
    }
    Ok(())
}

fn held_out_series<'a>(s: &Settings, cohort: &'a [FractionSeries]) -> Result<&'a [FractionSeries]> {
    for series in cohort {
        if series.treatment_fractions() < s.held_out {
            return Err(CliError::Data(format!(
                "{} has {} treatment fractions, fewer than the held-out fraction {}",
                series.patient_id,
                series.treatment_fractions(),
                s.held_out
            )));
        }
    }
    Ok(cohort)
}

pub fn adapt(s: &Settings) -> Result<()> {
    let cohort = load_cohort(&s.cohort_b_dir, s.spacing, &s.patients)?;
    let cohort = held_out_series(s, &cohort)?;
    for v in &s.variants {
        let base = load_base(&s.out, &v.name)?;
        for &iterations in &s.sweep {
            let cfg = s.adapt_config(iterations);
            let start = Instant::now();
            for series in cohort {
                let trace = run_series(&base, series, &cfg).map_err(CliError::runtime)?;
                let dir = trace_dir(&s.out, &v.name, iterations, &series.patient_id);
                if dir.exists() {
                    fs::remove_dir_all(&dir)?;
                }
                adapt::write_trace(&dir, &trace).map_err(CliError::runtime)?;
                let k = s.held_out;
                for (j, c) in trace.checkpoints.iter().enumerate().take(k + 1) {
                    let pred = predict_volume(&c.model, &series.scans[k].0).map_err(CliError::runtime)?;
                    volume::write_labels(&pred, cross_path(&dir, k, j)).map_err(CliError::runtime)?;
                }
            }
            progress(format!(
                "adapted {} over {} patients at {iterations} iterations in {:.1?}",
                v.name,
                cohort.len(),
                start.elapsed()
            ));
        }
    }
    Ok(())
}

/// Base-model predictions of every treatment fraction.
pub fn predict_base(s: &Settings) -> Result<()> {
    let cohort = load_cohort(&s.cohort_b_dir, s.spacing, &s.patients)?;
    for v in &s.variants {
        let base = load_base(&s.out, &v.name)?;
        for series in &cohort {
            let dir = base_prediction_dir(&s.out, &v.name, &series.patient_id);
            fs::create_dir_all(&dir)?;
            for j in 1..series.scans.len() {
                let pred = predict_volume(&base.model, &series.scans[j].0).map_err(CliError::runtime)?;
                volume::write_labels(&pred, adapt::prediction_path(&dir, j)).map_err(CliError::runtime)?;
            }
        }
        progress(format!("predicted {} treatment scans with {}", cohort.len(), v.name));
    }
    Ok(())
}

/// Segments one image file with one checkpoint; returns the inference time.
pub fn predict_file(checkpoint: &Path, image: &Path, output: &Path) -> Result<Duration> {
    let ckpt = segnet::load_checkpoint(checkpoint).map_err(|e| CliError::data(checkpoint, e))?;
    let volume = volume::read_image(image).map_err(|e| CliError::data(image, e))?;
    let start = Instant::now();
    let pred = predict_volume(&ckpt.model, &volume).map_err(|e| CliError::data(image, e))?;
    let elapsed = start.elapsed();
    volume::write_labels(&pred, output).map_err(CliError::runtime)?;
    Ok(elapsed)
}

fn read_prediction(path: &Path, truth: &LabelMap3) -> Result<LabelMap3> {
    if !path.is_file() {
        return Err(CliError::data(path, "prediction not found"));
    }
    let pred = volume::read_labels(path).map_err(|e| CliError::data(path, e))?;
    if pred.geometry() != truth.geometry() {
        return Err(CliError::data(path, "prediction grid differs from the ground truth"));
    }
    Ok(pred)
}

fn score(rows: &mut Vec<MetricRow>, patient: &str, fraction: usize, key: &ModelKey, pred: &LabelMap3, truth: &LabelMap3) -> Result<()> {
    let eval = evaluate_pair(pred, truth).map_err(CliError::runtime)?;
    rows.extend(eval.records.iter().map(|m| MetricRow::new(patient, fraction, key, m)));
    Ok(())
}

/// Scores every stored prediction against the resampled ground truth.
/// Rows are ordered by patient, fraction, model and organ.
pub fn evaluate_rows(s: &Settings) -> Result<Vec<MetricRow>> {
    let cohort = load_cohort(&s.cohort_b_dir, s.spacing, &s.patients)?;
    let cohort = held_out_series(s, &cohort)?;
    let mut rows = Vec::new();
    for series in cohort {
        let pid = &series.patient_id;
        for j in 1..series.scans.len() {
            let truth = &series.scans[j].1;
            for v in &s.variants {
                let base_dir = base_prediction_dir(&s.out, &v.name, pid);
                let pred = read_prediction(&adapt::prediction_path(&base_dir, j), truth)?;
                score(&mut rows, pid, j, &ModelKey::Base { variant: v.name.clone() }, &pred, truth)?;
                for &n in &s.sweep {
                    let dir = trace_dir(&s.out, &v.name, n, pid);
                    let pred = read_prediction(&adapt::prediction_path(&dir, j), truth)?;
                    let key = ModelKey::Adapted { variant: v.name.clone(), iterations: n };
                    score(&mut rows, pid, j, &key, &pred, truth)?;
                }
                if j == s.held_out {
                    for &n in &s.sweep {
                        let dir = trace_dir(&s.out, &v.name, n, pid);
                        for m in 0..=j {
                            let pred = read_prediction(&cross_path(&dir, j, m), truth)?;
                            let key = ModelKey::Cross { variant: v.name.clone(), iterations: n, model: m };
                            score(&mut rows, pid, j, &key, &pred, truth)?;
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub fn evaluate(s: &Settings) -> Result<Vec<MetricRow>> {
    let rows = evaluate_rows(s)?;
    fs::create_dir_all(&s.out)?;
    write_metrics_csv(&metrics_path(&s.out), &rows)?;
    progress(format!("wrote {} metric rows to {}", rows.len(), metrics_path(&s.out).display()));
    Ok(rows)
}

fn metadata(s: &Settings, report: &Report, metrics_name: &str, rows: usize, overlays: &[String]) -> String {
    let mut m = String::new();
    let sp = s.spacing;
    let _ = writeln!(m, "seed = {}", s.seed);
    let _ = writeln!(m, "metrics = {metrics_name}");
    let _ = writeln!(m, "metric_rows = {rows}");
    let _ = writeln!(m, "evaluation_grid_mm = {} {} {}", sp[0], sp[1], sp[2]);
    let _ = writeln!(m, "aggregation = mean and population standard deviation over fraction-level values");
    let _ = writeln!(m, "missing_organ_dsc = counted as 0");
    let _ = writeln!(m, "missing_organ_surface_distances = excluded");
    let _ = writeln!(m, "pairing = {}", report.pairing);
    let _ = writeln!(m, "alpha = {}", report.alpha);
    let _ = writeln!(
        m,
        "test = two-sided Wilcoxon signed-rank, zero differences dropped, exact enumeration up to {} pairs, normal approximation with tie and continuity correction above",
        metrics::EXACT_LIMIT
    );
    let _ = writeln!(m, "markers = † base_a vs proposed_a; ‡ base_b vs proposed_b; * any other variant");
    let _ = writeln!(m, "row_labels = from model ids in the metrics file");
    let _ = writeln!(m, "held_out_fraction = {}", s.held_out);
    let _ = writeln!(m, "boxplots = quartiles by linear interpolation, whiskers at min and max, dot at mean");
    let _ = writeln!(m, "overlays = {}", if overlays.is_empty() { "none".to_string() } else { overlays.join(" ") });
    m
}

/// Slice overlays of the first admitted patient on the held-out fraction:
/// the base model and each adapted chain's last model, per variant.
fn write_overlays(s: &Settings, dir: &Path) -> Result<Vec<String>> {
    let Ok(cohort) = load_cohort(&s.cohort_b_dir, s.spacing, &s.patients) else {
        return Ok(Vec::new());
    };
    let Some(series) = cohort.first() else { return Ok(Vec::new()) };
    let k = s.held_out;
    let Some((image, truth)) = series.scans.get(k) else { return Ok(Vec::new()) };
    let z = figures::richest_slice(truth, OrganLabel::Prostate);
    let pid = &series.patient_id;
    let mut written = Vec::new();
    let mut emit = |name: String, path: PathBuf, image: &Volume3| -> Result<()> {
        if let Ok(pred) = read_prediction(&path, truth) {
            fs::write(dir.join(&name), figures::overlay_pgm(image, truth, &pred, z, 4))?;
            written.push(name);
        }
        Ok(())
    };
    for v in &s.variants {
        let base = adapt::prediction_path(&base_prediction_dir(&s.out, &v.name, pid), k);
        emit(format!("overlay_{}_base_{pid}_f{k}.pgm", v.name), base, image)?;
        for &n in &s.sweep {
            let p = adapt::prediction_path(&trace_dir(&s.out, &v.name, n, pid), k);
            emit(format!("overlay_{}_it{n}_{pid}_f{k}.pgm", v.name), p, image)?;
        }
    }
    Ok(written)
}

/// Tables, significance tests, session boxplots, overlays and metadata.
pub fn report(s: &Settings, metrics: Option<&Path>) -> Result<Report> {
    let default_path = metrics_path(&s.out);
    let path = metrics.unwrap_or(&default_path);
    if !path.is_file() {
        return Err(CliError::data(path, "metrics file not found (run evaluate first)"));
    }
    let rows = read_metrics_csv(path)?;
    let report = Report::build(&rows, s.pairing, s.alpha)?;
    let dir = report_dir(&s.out);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("tables.txt"), report.render_tables())?;
    fs::write(dir.join("summary.csv"), report.summary_csv())?;
    fs::write(dir.join("significance.csv"), report.significance_csv())?;
    for set in &report.cross {
        let name = format!("fig_sessions_{}_it{}.svg", set.variant, set.iterations);
        fs::write(dir.join(name), figures::session_boxplots_svg(set))?;
    }
    let overlays = write_overlays(s, &dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    fs::write(dir.join("metadata.txt"), metadata(s, &report, &name, rows.len(), &overlays))?;
    progress(format!("wrote report to {}", dir.display()));
    Ok(report)
}

/// Every stage in order.
pub fn run(s: &Settings) -> Result<Report> {
    gen_cohort(s, Institutes::Both)?;
    train(s)?;
    adapt(s)?;
    predict_base(s)?;
    evaluate(s)?;
    report(s, None)
}
