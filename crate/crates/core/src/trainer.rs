//! Patch sampling, rectified Adam and the base-model training loop.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamTensor, Real, Tape, Tensor};
use crate::phantom::FractionSeries;
use crate::rng::{self, StreamRng};
use crate::segnet::{normalize_intensity, CheckpointMeta, Model, ModelCheckpoint, NetworkSpec, SegnetError};
use crate::volume::{LabelMap3, Volume3, VolumeError, N_CLASSES};

/// Smoothing constant of the training Dice loss. Kept tiny: a larger value
/// rewards predicting nothing for every class missing from a patch, which
/// drowns out the small organs.
pub const DICE_EPS: f64 = 1e-5;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("image and label geometry differ")]
    GeometryMismatch,
    #[error("patch size {patch} does not fit volume dims {dims:?}")]
    PatchTooLarge { patch: usize, dims: [usize; 3] },
    #[error("label map contains no voxels")]
    EmptyLabels,
    #[error("training split is empty ({volumes} volumes at split {split})")]
    EmptySplit { volumes: usize, split: f64 },
    #[error("optimizer mismatch: {0}")]
    StateMismatch(String),
    #[error(transparent)]
    Segnet(#[from] SegnetError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub patches_per_volume: usize,
    pub batch_size: usize,
    pub iterations: u64,
    pub learning_rate: f64,
    pub seed: u64,
    /// Share of volumes used for training; the rest only feed the validation curve.
    pub train_fraction: f64,
    /// A loss record is emitted every `log_every` iterations and after the last one.
    pub log_every: u64,
    /// Fixed validation patches drawn per validation volume.
    pub val_patches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            patches_per_volume: 1000,
            batch_size: 4,
            iterations: 2000,
            learning_rate: 1e-4,
            seed: 0,
            train_fraction: 0.7,
            log_every: 100,
            val_patches: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.patch_size == 0 || self.patches_per_volume == 0 || self.batch_size == 0 {
            return bad("patch size, patches per volume and batch size must be >= 1");
        }
        if self.log_every == 0 || self.val_patches == 0 {
            return bad("log interval and validation patches must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Where a patch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSource {
    pub patient: usize,
    pub fraction: usize,
    /// Sampled centre voxel `(x, y, z)`; the window around it may be shifted
    /// inward to stay inside the volume.
    pub center: [usize; 3],
}

/// Normalised `(1, P, P, P)` image patches with `(5, P, P, P)` one-hot targets.
#[derive(Debug, Clone, Default)]
pub struct PatchBatch {
    pub images: Vec<Tensor<f32>>,
    pub targets: Vec<Tensor<f32>>,
    pub sources: Vec<PatchSource>,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, (image, target, source): (Tensor<f32>, Tensor<f32>, PatchSource)) {
        self.images.push(image);
        self.targets.push(target);
        self.sources.push(source);
    }
}

/// Class-balanced patch sampler over one image/label pair.
#[derive(Debug, Clone)]
pub struct PatchSampler<'a> {
    image: &'a Volume3,
    labels: &'a LabelMap3,
    patch: usize,
    /// Voxel indices of each present class, in class order.
    by_class: Vec<(u8, Vec<u32>)>,
}

impl<'a> PatchSampler<'a> {
    pub fn new(image: &'a Volume3, labels: &'a LabelMap3, patch: usize) -> Result<Self> {
        if !labels.matches(image) {
            return Err(TrainError::GeometryMismatch);
        }
        let dims = image.dims();
        if patch == 0 || dims.iter().any(|&n| n < patch) {
            return Err(TrainError::PatchTooLarge { patch, dims });
        }
        let mut by_class: Vec<Vec<u32>> = vec![Vec::new(); N_CLASSES];
        for (i, &l) in labels.labels().iter().enumerate() {
            if l as usize >= N_CLASSES {
                return Err(VolumeError::InvalidLabel { index: i, value: l }.into());
            }
            by_class[l as usize].push(i as u32);
        }
        let by_class: Vec<_> = by_class
            .into_iter()
            .enumerate()
            .filter(|(_, v)| !v.is_empty())
            .map(|(c, v)| (c as u8, v))
            .collect();
        if by_class.is_empty() {
            return Err(TrainError::EmptyLabels);
        }
        Ok(Self {
            image,
            labels,
            patch,
            by_class,
        })
    }

    pub fn present_classes(&self) -> Vec<u8> {
        self.by_class.iter().map(|(c, _)| *c).collect()
    }

    /// Class uniformly over present classes, then a voxel of that class uniformly.
    pub fn draw_center(&self, rng: &mut StreamRng) -> (u8, [usize; 3]) {
        let (class, voxels) = &self.by_class[rng.random_range(0..self.by_class.len())];
        let v = voxels[rng.random_range(0..voxels.len())];
        (*class, self.image.geometry().coords(v as usize))
    }

    /// Window origin for `center`, clamped so the window lies inside the volume.
    pub fn window_start(&self, center: [usize; 3]) -> [usize; 3] {
        let dims = self.image.dims();
        let half = self.patch / 2;
        [0, 1, 2].map(|a| center[a].saturating_sub(half).min(dims[a] - self.patch))
    }

    /// Image and one-hot target patches around `center`.
    pub fn extract(&self, center: [usize; 3]) -> (Tensor<f32>, Tensor<f32>) {
        let p = self.patch;
        let pv = p * p * p;
        let start = self.window_start(center);
        let g = self.image.geometry();
        let mut image = Vec::with_capacity(pv);
        let mut target = vec![0.0f32; N_CLASSES * pv];
        let mut k = 0;
        for z in start[2]..start[2] + p {
            for y in start[1]..start[1] + p {
                let row = g.index(start[0], y, z);
                for i in row..row + p {
                    image.push(normalize_intensity(self.image.voxels()[i]));
                    target[self.labels.labels()[i] as usize * pv + k] = 1.0;
                    k += 1;
                }
            }
        }
        (
            Tensor::from_vec(vec![1, p, p, p], image).expect("patch buffer"),
            Tensor::from_vec(vec![N_CLASSES, p, p, p], target).expect("target buffer"),
        )
    }

    pub fn sample(&self, rng: &mut StreamRng, patient: usize, fraction: usize) -> (Tensor<f32>, Tensor<f32>, PatchSource) {
        let (_, center) = self.draw_center(rng);
        let (image, target) = self.extract(center);
        (
            image,
            target,
            PatchSource {
                patient,
                fraction,
                center,
            },
        )
    }
}

/// Draws `n` class-balanced patches from one image/label pair.
pub fn sample_patches(
    image: &Volume3,
    labels: &LabelMap3,
    n: usize,
    patch_size: usize,
    (patient, fraction): (usize, usize),
    rng: &mut StreamRng,
) -> Result<PatchBatch> {
    let sampler = PatchSampler::new(image, labels, patch_size)?;
    let mut batch = PatchBatch::default();
    for _ in 0..n {
        batch.push(sampler.sample(rng, patient, fraction));
    }
    Ok(batch)
}

/// Rectified Adam moments. Moments are kept in double precision whatever the
/// parameter type; frozen parameters get empty moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct RAdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl RAdamState {
    pub fn new<T: Real>(params: &[ParamTensor<T>]) -> Self {
        let zeros = |p: &ParamTensor<T>| if p.trainable { vec![0.0; p.value.len()] } else { Vec::new() };
        Self {
            t: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
        }
    }

    /// Length of the approximated simple moving average after `t` steps.
    pub fn rho(&self, t: u64) -> f64 {
        let rho_inf = 2.0 / (1.0 - self.beta2) - 1.0;
        let b2t = self.beta2.powf(t as f64);
        rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// Variance rectification factor, `None` while the variance is intractable.
    pub fn rectification(&self, t: u64) -> Option<f64> {
        let rho_inf = 2.0 / (1.0 - self.beta2) - 1.0;
        let rho = self.rho(t);
        (rho > 4.0).then(|| {
            (((rho - 4.0) * (rho - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt()
        })
    }
}

/// One rectified-Adam update. `grads[i]` is `None` when parameter `i` received
/// no gradient (treated as zero). Frozen parameters are skipped entirely.
pub fn radam_step<T: Real>(
    params: &mut [ParamTensor<T>],
    grads: &[Option<Vec<T>>],
    state: &mut RAdamState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::StateMismatch(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        let n = p.value.len();
        let grad_ok = grads[i].as_ref().is_none_or(|g| g.len() == n);
        let state_ok = !p.trainable || (state.m[i].len() == n && state.v[i].len() == n);
        if !grad_ok || !state_ok {
            return Err(TrainError::StateMismatch(format!("parameter `{}`", p.name)));
        }
    }
    state.t += 1;
    let t = state.t;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powf(t as f64);
    let bc2 = 1.0 - b2.powf(t as f64);
    let rect = state.rectification(t);
    for (i, p) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let values = p.value.data_mut();
        for k in 0..values.len() {
            let g = grads[i].as_ref().map_or(0.0, |g| g[k].as_f64());
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            let m_hat = m[k] / bc1;
            let step = match rect {
                Some(r) => r * m_hat / ((v[k] / bc2).sqrt() + state.eps),
                None => m_hat,
            };
            values[k] = T::from_f64_lossy(values[k].as_f64() - lr * step);
        }
    }
    Ok(())
}

/// Mean soft Dice loss of `model` over a batch, without gradients.
pub fn batch_loss(model: &Model<f32>, batch: &PatchBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(TrainError::InvalidConfig("empty batch".into()));
    }
    let mut total = 0.0;
    for (image, target) in batch.images.iter().zip(&batch.targets) {
        let mut tape = Tape::new();
        let vars: Vec<_> = model.params().iter().map(|p| tape.constant(p.value.clone())).collect();
        let x = tape.constant(image.clone());
        let probs = model.forward_with(&mut tape, x, &vars)?;
        let loss = tape.dice_loss(probs, target.clone(), DICE_EPS)?;
        total += tape.value(loss).data()[0].as_f64();
    }
    Ok(total / batch.len() as f64)
}

/// Mean soft Dice of `model` on one patch over the classes present in
/// `target`. An absent class only nears a soft Dice of one once its
/// probability mass drops below the smoothing constant, so it is skipped.
pub fn present_class_soft_dice(model: &Model<f32>, image: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let probs = model.forward(&mut tape, x)?.probabilities;
    let p = tape.value(probs);
    if p.shape() != target.shape() {
        return Err(TrainError::InvalidConfig("target shape differs from the prediction".into()));
    }
    let mut scores = Vec::new();
    for c in 0..target.shape()[0] {
        let (pc, tc) = (p.channel(c), target.channel(c));
        let t_sum: f64 = tc.iter().map(|&v| v as f64).sum();
        if t_sum == 0.0 {
            continue;
        }
        let inter: f64 = pc.iter().zip(tc).map(|(&a, &b)| a as f64 * b as f64).sum();
        let p_sum: f64 = pc.iter().map(|&v| v as f64).sum();
        scores.push(2.0 * inter / (p_sum + t_sum));
    }
    if scores.is_empty() {
        return Err(TrainError::EmptyLabels);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Forward, Dice loss averaged over the batch, backward and one optimizer
/// step on the trainable parameters. Returns the batch loss before the step.
pub fn train_step(model: &mut Model<f32>, state: &mut RAdamState, batch: &PatchBatch, lr: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.record_params(&mut tape);
    let mut losses = Vec::with_capacity(batch.len());
    for (image, target) in batch.images.iter().zip(&batch.targets) {
        let x = tape.constant(image.clone());
        let probs = model.forward_with(&mut tape, x, &vars)?;
        losses.push(tape.dice_loss(probs, target.clone(), DICE_EPS)?);
    }
    let loss = tape.mean(&losses)?;
    let value = tape.value(loss).data()[0].as_f64();
    tape.backward(loss)?;
    let grads: Vec<Option<Vec<f32>>> = vars.iter().map(|&v| tape.grad(v).map(<[f32]>::to_vec)).collect();
    radam_step(model.params_mut(), &grads, state, lr)?;
    Ok(value)
}

/// One point of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    /// Optimizer steps completed.
    pub iteration: u64,
    /// Mean training batch loss since the previous record.
    pub train_loss: f64,
    /// Mean loss on the fixed validation patches; `None` without a validation split.
    pub val_loss: Option<f64>,
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("iteration,train_loss,val_loss\n");
    for r in records {
        let val = r.val_loss.map(|v| format!("{v:.9}")).unwrap_or_default();
        s.push_str(&format!("{},{:.9},{}\n", r.iteration, r.train_loss, val));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub curve: Vec<LossRecord>,
    /// Indices into the input cohort, training then validation.
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

// stream tags
const SPLIT: u64 = 0x5917;
const INIT: u64 = 0x1417;
const POOL: u64 = 0x9A7C;
const BATCH: u64 = 0xBA7C;
const VALIDATION: u64 = 0x7A1D;

/// Seeded shuffle of `0..n`, first `round(n * fraction)` (at least one) for training.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, &[SPLIT]);
    for i in (1..n).rev() {
        idx.swap(i, r.random_range(0..=i));
    }
    let n_train = ((n as f64 * fraction).round() as usize).clamp(n.min(1), n);
    let val = idx.split_off(n_train);
    (idx, val)
}

/// The model that `train_base` starts from.
pub fn initial_model(spec: &NetworkSpec, seed: u64) -> Result<Model<f32>> {
    Ok(Model::build(spec.clone(), rng::derive_seed(seed, &[INIT]))?)
}

/// Trains a base model on the planning scans of `cohort`, which must already be
/// at the network's training spacing.
///
/// Every volume owns a virtual pool of `patches_per_volume` patches; pool
/// entry `k` of volume `i` is drawn from its own stream and materialised only
/// when a batch slot selects it. Slots pick a volume uniformly, then an entry.
pub fn train_base(cohort: &[FractionSeries], spec: &NetworkSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.patch_size != spec.patch_size {
        return Err(TrainError::InvalidConfig(format!(
            "training patch {} differs from network patch {}",
            cfg.patch_size, spec.patch_size
        )));
    }
    let (train_idx, val_idx) = split_indices(cohort.len(), cfg.train_fraction, cfg.seed);
    if train_idx.is_empty() {
        return Err(TrainError::EmptySplit {
            volumes: cohort.len(),
            split: cfg.train_fraction,
        });
    }
    let sampler = |i: usize| {
        let (image, labels) = cohort[i].planning();
        PatchSampler::new(image, labels, cfg.patch_size)
    };
    let train: Vec<PatchSampler> = train_idx.iter().map(|&i| sampler(i)).collect::<Result<_>>()?;
    let mut val_batch = PatchBatch::default();
    for &i in &val_idx {
        let s = sampler(i)?;
        let mut r = rng::stream(cfg.seed, &[VALIDATION, i as u64]);
        for _ in 0..cfg.val_patches {
            val_batch.push(s.sample(&mut r, i, 0));
        }
    }

    let mut model = initial_model(spec, cfg.seed)?;
    model.unfreeze_all();
    let mut state = RAdamState::new(model.params());
    let mut curve = Vec::new();
    let mut running = 0.0;
    let mut since = 0u64;
    for it in 0..cfg.iterations {
        let mut batch = PatchBatch::default();
        for slot in 0..cfg.batch_size {
            let mut r = rng::stream(cfg.seed, &[BATCH, it, slot as u64]);
            let v = r.random_range(0..train.len());
            let k = r.random_range(0..cfg.patches_per_volume);
            let source = train_idx[v];
            let mut pool = rng::stream(cfg.seed, &[POOL, source as u64, k as u64]);
            batch.push(train[v].sample(&mut pool, source, 0));
        }
        running += train_step(&mut model, &mut state, &batch, cfg.learning_rate)?;
        since += 1;
        if (it + 1) % cfg.log_every == 0 || it + 1 == cfg.iterations {
            let val_loss = if val_batch.is_empty() {
                None
            } else {
                Some(batch_loss(&model, &val_batch)?)
            };
            curve.push(LossRecord {
                iteration: it + 1,
                train_loss: running / since as f64,
                val_loss,
            });
            running = 0.0;
            since = 0;
        }
    }
    let id = spec.variant().map_or("base", |v| v.name());
    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint {
            model,
            meta: CheckpointMeta::base(id, cfg.iterations, cfg.seed),
        },
        curve,
        train_indices: train_idx,
        val_indices: val_idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn pair(dims: [usize; 3], label: impl Fn(usize) -> u8) -> (Volume3, LabelMap3) {
        let g = Geometry::new(dims, [1.0; 3], [0.0; 3]).unwrap();
        let labels = LabelMap3::new(g, (0..g.len()).map(label).collect()).unwrap();
        let image = Volume3::new(g, labels.labels().iter().map(|&l| 1000.0 + 10.0 * l as f32).collect()).unwrap();
        (image, labels)
    }

    #[test]
    fn centers_follow_present_classes() {
        let (img, lab) = pair([20, 20, 20], |i| if i % 7 == 0 { 3 } else { 0 });
        let mut r = rng::stream(1, &[]);
        let b = sample_patches(&img, &lab, 2000, 16, (0, 0), &mut r).unwrap();
        let mut counts = [0usize; 5];
        for s in &b.sources {
            let g = img.geometry();
            counts[lab.labels()[g.index(s.center[0], s.center[1], s.center[2])] as usize] += 1;
        }
        assert_eq!(counts[1] + counts[2] + counts[4], 0);
        assert!((counts[0] as f64 / 2000.0 - 0.5).abs() < 0.05, "{counts:?}");
    }

    #[test]
    fn corner_center_is_clamped() {
        let (img, lab) = pair([20, 18, 17], |_| 0);
        let s = PatchSampler::new(&img, &lab, 16).unwrap();
        assert_eq!(s.window_start([0, 0, 0]), [0, 0, 0]);
        assert_eq!(s.window_start([19, 17, 16]), [4, 2, 1]);
        let (x, t) = s.extract([19, 17, 16]);
        assert_eq!(x.shape(), &[1, 16, 16, 16]);
        assert_eq!(t.shape(), &[5, 16, 16, 16]);
    }

    #[test]
    fn patch_larger_than_volume_is_error() {
        let (img, lab) = pair([20, 15, 20], |_| 0);
        assert!(matches!(
            PatchSampler::new(&img, &lab, 16),
            Err(TrainError::PatchTooLarge { .. })
        ));
    }

    #[test]
    fn target_patch_is_one_hot_of_window() {
        let (img, lab) = pair([17, 16, 16], |i| (i % 5) as u8);
        let s = PatchSampler::new(&img, &lab, 16).unwrap();
        let (x, t) = s.extract([16, 8, 8]);
        let g = img.geometry();
        let pv = 16 * 16 * 16;
        for k in [0usize, 17, 4095] {
            let (px, py, pz) = (k % 16, (k / 16) % 16, k / 256);
            let l = lab.labels()[g.index(px + 1, py, pz)] as usize;
            assert_eq!(t.data()[l * pv + k], 1.0);
            assert_eq!((0..5).map(|c| t.data()[c * pv + k]).sum::<f32>(), 1.0);
            assert_eq!(x.data()[k], normalize_intensity(1000.0 + 10.0 * l as f32));
        }
    }

    #[test]
    fn split_is_seeded_partition() {
        let (a, b) = split_indices(20, 0.7, 3);
        assert_eq!((a.len(), b.len()), (14, 6));
        let mut all: Vec<_> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(split_indices(20, 0.7, 3), (a, b));
        assert_eq!(split_indices(1, 0.3, 0).0, vec![0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for f in [0.0, 1.0, -0.2] {
            let c = TrainConfig { train_fraction: f, ..Default::default() };
            assert!(c.validate().is_err());
        }
        let c = TrainConfig { learning_rate: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn rho_crosses_four_after_a_few_steps() {
        let s = RAdamState::new::<f64>(&[]);
        assert!((s.rho(1) - 1.0).abs() < 1e-9);
        assert!(s.rectification(1).is_none());
        let first = (1..100).find(|&t| s.rectification(t).is_some()).unwrap();
        assert_eq!(first, 5);
        assert!(s.rectification(1_000_000).unwrap() > 0.99);
    }
}
