//! Sequential per-patient head adaptation across treatment fractions.
//!
//! `M_j` is obtained from `M_{j-1}` by fine-tuning only the head on the image
//! and corrected contours of scan `j - 1`; it then segments scan `j`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use thiserror::Error;

use crate::phantom::FractionSeries;
use crate::rng;
use crate::segnet::{self, predict_volume, CheckpointMeta, ModelCheckpoint, SegnetError};
use crate::trainer::{train_step, PatchBatch, PatchSampler, RAdamState, TrainError};
use crate::volume::{self, LabelMap3, Volume3, VolumeError};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("invalid adaptation config: {0}")]
    InvalidConfig(String),
    #[error("image and label geometry differ")]
    GeometryMismatch,
    #[error("label {label} is outside the model's {n_classes} classes")]
    UnknownLabel { label: u8, n_classes: usize },
    #[error("series `{0}` has no treatment fraction after the planning scan")]
    NoFractions(String),
    #[error("trace directory {path}: {reason}")]
    Trace { path: PathBuf, reason: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Segnet(#[from] SegnetError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AdaptError>;

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationConfig {
    /// Optimizer steps per fraction.
    pub iterations: u64,
    /// Size of the virtual patch pool drawn from the previous scan.
    pub patches_per_volume: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patch_size: usize,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            patches_per_volume: 2000,
            batch_size: 4,
            learning_rate: 1e-4,
            patch_size: 16,
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patches_per_volume == 0 || self.batch_size == 0 || self.patch_size == 0 {
            return Err(AdaptError::InvalidConfig(
                "patches per volume, batch size and patch size must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(AdaptError::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }

    fn manifest(&self) -> String {
        format!(
            "iterations={}\npatches_per_volume={}\nbatch_size={}\nlearning_rate={}\npatch_size={}\nseed={}\n",
            self.iterations, self.patches_per_volume, self.batch_size, self.learning_rate, self.patch_size, self.seed
        )
    }
}

const POOL: u64 = 0xAD9A;
const BATCH: u64 = 0xADBA;

/// Identifier of `M_j` in a patient's chain.
pub fn adapted_id(patient_id: &str, base_id: &str, iterations: u64, j: usize) -> String {
    format!("{patient_id}/{base_id}/it{iterations}/M{j}")
}

/// One application of the adaptation step: a copy of `prev` whose head has
/// been fine-tuned on `(image, labels)` with a fresh optimizer. The produced
/// model is recorded as `M_fraction` with `prev` as parent.
pub fn adapt_once(
    prev: &ModelCheckpoint,
    image: &Volume3,
    labels: &LabelMap3,
    fraction: usize,
    model_id: &str,
    cfg: &AdaptationConfig,
) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    if !labels.matches(image) {
        return Err(AdaptError::GeometryMismatch);
    }
    let n_classes = prev.model.spec().n_classes;
    if let Some(&label) = labels.labels().iter().find(|&&l| l as usize >= n_classes) {
        return Err(AdaptError::UnknownLabel { label, n_classes });
    }
    if cfg.patch_size != prev.model.spec().patch_size {
        return Err(AdaptError::InvalidConfig(format!(
            "adaptation patch {} differs from network patch {}",
            cfg.patch_size,
            prev.model.spec().patch_size
        )));
    }
    let mut model = prev.model.clone();
    model.freeze_backbone();
    if cfg.iterations > 0 {
        let sampler = PatchSampler::new(image, labels, cfg.patch_size)?;
        let mut state = RAdamState::new(model.params());
        let j = fraction as u64;
        for it in 0..cfg.iterations {
            let mut batch = PatchBatch::default();
            for slot in 0..cfg.batch_size {
                let k = rng::stream(cfg.seed, &[BATCH, j, it, slot as u64]).random_range(0..cfg.patches_per_volume);
                let mut pool = rng::stream(cfg.seed, &[POOL, j, k as u64]);
                batch.push(sampler.sample(&mut pool, 0, fraction.saturating_sub(1)));
            }
            train_step(&mut model, &mut state, &batch, cfg.learning_rate)?;
        }
    }
    Ok(ModelCheckpoint {
        model,
        meta: CheckpointMeta {
            model_id: model_id.to_string(),
            parent_id: Some(prev.meta.model_id.clone()),
            fraction: Some(fraction),
            iterations: cfg.iterations,
            seed: cfg.seed,
            created: prev.meta.created,
        },
    })
}

/// The chain `M_0..M_J` of one patient with the per-fraction predictions.
#[derive(Debug, Clone)]
pub struct AdaptationTrace {
    pub patient_id: String,
    pub config: AdaptationConfig,
    /// `checkpoints[j]` is `M_j`; `checkpoints[0]` is the base model.
    pub checkpoints: Vec<ModelCheckpoint>,
    /// `predictions[j - 1]` is `M_j(I_j)` for `j = 1..=J`.
    pub predictions: Vec<LabelMap3>,
    /// Wall-clock time of producing `M_j`, `j = 1..=J`.
    pub timings: Vec<Duration>,
}

/// Adapts along a series: `M_j` is tuned on scan `j - 1` and then segments
/// scan `j`. Ground truth of scan `j` is only read when producing `M_{j+1}`.
pub fn run_series(base: &ModelCheckpoint, series: &FractionSeries, cfg: &AdaptationConfig) -> Result<AdaptationTrace> {
    let fractions = series.treatment_fractions();
    if series.scans.is_empty() || fractions == 0 {
        return Err(AdaptError::NoFractions(series.patient_id.clone()));
    }
    let mut trace = AdaptationTrace {
        patient_id: series.patient_id.clone(),
        config: cfg.clone(),
        checkpoints: vec![base.clone()],
        predictions: Vec::with_capacity(fractions),
        timings: Vec::with_capacity(fractions),
    };
    for j in 1..=fractions {
        let (prev_image, prev_labels) = &series.scans[j - 1];
        let id = adapted_id(&series.patient_id, base.id(), cfg.iterations, j);
        let start = Instant::now();
        let next = adapt_once(&trace.checkpoints[j - 1], prev_image, prev_labels, j, &id, cfg)?;
        trace.timings.push(start.elapsed());
        let image = &series.scans[j].0;
        trace.predictions.push(predict_volume(&next.model, image)?);
        trace.checkpoints.push(next);
    }
    Ok(trace)
}

/// Predictions of every model in the trace on one image, in chain order.
pub fn cross_apply(trace: &AdaptationTrace, image: &Volume3) -> Result<Vec<LabelMap3>> {
    trace
        .checkpoints
        .iter()
        .map(|c| Ok(predict_volume(&c.model, image)?))
        .collect()
}

pub const TRACE_MANIFEST: &str = "manifest.txt";
pub const TRACE_TIMINGS: &str = "timings.txt";

pub fn checkpoint_path(dir: &Path, j: usize) -> PathBuf {
    dir.join(format!("M_{j}.ckpt"))
}

pub fn prediction_path(dir: &Path, j: usize) -> PathBuf {
    dir.join(format!("pred_{j}.mha"))
}

/// Writes `M_<j>.ckpt`, `pred_<j>.mha` (for `j >= 1`), a deterministic
/// manifest and a separate timings file.
pub fn write_trace(dir: &Path, trace: &AdaptationTrace) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (j, c) in trace.checkpoints.iter().enumerate() {
        segnet::save_checkpoint(&c.model, &c.meta, checkpoint_path(dir, j))?;
    }
    for (i, p) in trace.predictions.iter().enumerate() {
        volume::write_labels(p, prediction_path(dir, i + 1))?;
    }
    let mut m = format!("patient={}\nfractions={}\n", trace.patient_id, trace.predictions.len());
    m.push_str(&trace.config.manifest());
    for (j, c) in trace.checkpoints.iter().enumerate() {
        let _ = writeln!(m, "model.{j}={}", c.meta.model_id);
    }
    fs::write(dir.join(TRACE_MANIFEST), m)?;
    let mut t = String::from("fraction,adapt_seconds\n");
    for (i, d) in trace.timings.iter().enumerate() {
        let _ = writeln!(t, "{},{:.3}", i + 1, d.as_secs_f64());
    }
    fs::write(dir.join(TRACE_TIMINGS), t)?;
    Ok(())
}

/// Loads the checkpoints and predictions written by [`write_trace`].
pub fn read_trace(dir: &Path) -> Result<(Vec<ModelCheckpoint>, Vec<LabelMap3>)> {
    let mut checkpoints = Vec::new();
    while checkpoint_path(dir, checkpoints.len()).exists() {
        checkpoints.push(segnet::load_checkpoint(checkpoint_path(dir, checkpoints.len()))?);
    }
    if checkpoints.len() < 2 {
        return Err(AdaptError::Trace {
            path: dir.to_path_buf(),
            reason: "expected at least M_0.ckpt and M_1.ckpt".into(),
        });
    }
    let predictions = (1..checkpoints.len())
        .map(|j| Ok(volume::read_labels(prediction_path(dir, j))?))
        .collect::<Result<_>>()?;
    Ok((checkpoints, predictions))
}
