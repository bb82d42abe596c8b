//! Encoder-decoder segmentation networks with a per-voxel dense head.
//!
//! The encoder has four stride-2 3x3x3 convolution blocks. Each of the four
//! decoder blocks is a stride-1 convolution, ReLU and 2x upsampling, after
//! which the encoder feature map of the same resolution (the raw input for
//! the last block) is concatenated. The head is a stack of 1x1x1
//! convolutions: one for [`Variant::BaseA`], three for [`Variant::BaseB`].

mod checkpoint;
mod inference;

use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamTensor, Real, Tape, Tensor, Var};
use crate::rng;
use crate::volume::{VolumeError, N_CLASSES};

pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint, CheckpointMeta, ModelCheckpoint};
pub use inference::{forward_probabilities, predict_volume, tile_starts, TILE_OVERLAP};

/// Number of resolution levels in encoder and decoder.
pub const RESOLUTIONS: usize = 4;

/// Intensities enter the network as `(x - INTENSITY_CENTER) / INTENSITY_SCALE`.
pub const INTENSITY_CENTER: f32 = 1000.0;
pub const INTENSITY_SCALE: f32 = 10.0;

#[inline]
pub fn normalize_intensity(x: f32) -> f32 {
    (x - INTENSITY_CENTER) / INTENSITY_SCALE
}

#[derive(Debug, Error)]
pub enum SegnetError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("patch dims {0:?} are not divisible by 16")]
    IndivisibleDims([usize; 3]),
    #[error("volume dims {dims:?} are smaller than the {patch}^3 inference patch")]
    VolumeTooSmall { dims: [usize; 3], patch: usize },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("parameter `{name}` has shape {found:?}, spec requires {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SegnetError>;

/// The two baseline head configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// One dense layer.
    BaseA,
    /// Three dense layers.
    BaseB,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::BaseA => "base_a",
            Variant::BaseB => "base_b",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "base_a" | "a" => Some(Variant::BaseA),
            "base_b" | "b" => Some(Variant::BaseB),
            _ => None,
        }
    }

    pub fn fc_layers(self) -> usize {
        match self {
            Variant::BaseA => 1,
            Variant::BaseB => 3,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    /// Feature channels per encoder level, shallow to deep.
    pub channels: [usize; RESOLUTIONS],
    pub n_fc_layers: usize,
    pub fc_width: usize,
    pub n_classes: usize,
    pub patch_size: usize,
}

impl NetworkSpec {
    pub fn new(variant: Variant) -> Self {
        Self {
            channels: [16, 32, 64, 128],
            n_fc_layers: variant.fc_layers(),
            fc_width: 64,
            n_classes: N_CLASSES,
            patch_size: 16,
        }
    }

    pub fn variant(&self) -> Option<Variant> {
        match self.n_fc_layers {
            1 => Some(Variant::BaseA),
            3 => Some(Variant::BaseB),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fc_layers != 1 && self.n_fc_layers != 3 {
            return Err(SegnetError::InvalidSpec(format!(
                "n_fc_layers must be 1 or 3, got {}",
                self.n_fc_layers
            )));
        }
        if self.n_classes != N_CLASSES {
            return Err(SegnetError::InvalidSpec(format!(
                "n_classes must be {N_CLASSES}, got {}",
                self.n_classes
            )));
        }
        if self.channels.iter().any(|&c| c == 0) || self.fc_width == 0 {
            return Err(SegnetError::InvalidSpec("channel counts must be positive".into()));
        }
        if self.channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(SegnetError::InvalidSpec(format!(
                "encoder channels must be non-decreasing, got {:?}",
                self.channels
            )));
        }
        if self.patch_size == 0 || self.patch_size % 16 != 0 {
            return Err(SegnetError::InvalidSpec(format!(
                "patch size {} must be a positive multiple of 16",
                self.patch_size
            )));
        }
        Ok(())
    }

    /// Input channels of the head: first decoder block width plus the raw image.
    pub fn head_input(&self) -> usize {
        self.channels[0] + 1
    }

    /// Ordered `(name, shape)` list of every parameter.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.channels;
        let mut out = Vec::new();
        let mut conv = |name: String, c_out: usize, c_in: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![c_out, c_in, k, k, k]));
            out.push((format!("{name}.bias"), vec![c_out]));
        };
        let enc_in = [1, c[0], c[1], c[2]];
        for l in 0..RESOLUTIONS {
            conv(format!("enc{}", l + 1), c[l], enc_in[l], 3);
        }
        // decoder, deepest first; skip widths are the encoder maps one level up
        let skip = [1, c[0], c[1], c[2]];
        let mut width = c[3];
        for l in (0..RESOLUTIONS).rev() {
            conv(format!("dec{}", l + 1), c[l], width, 3);
            width = c[l] + skip[l];
        }
        let mut fc_in = width;
        for i in 0..self.n_fc_layers {
            let last = i + 1 == self.n_fc_layers;
            let fc_out = if last { self.n_classes } else { self.fc_width };
            conv(format!("head{}", i + 1), fc_out, fc_in, 1);
            fc_in = fc_out;
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Partition of parameter names into the frozen backbone and the adaptable head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroupSplit {
    pub backbone: Vec<String>,
    pub head: Vec<String>,
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head")
}

/// Network parameters plus the spec they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    spec: NetworkSpec,
    params: Vec<ParamTensor<T>>,
}

/// Handles to the recorded parameters of one forward pass, in model order.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub probabilities: Var,
    pub params: Vec<Var>,
}

impl<T: Real> Model<T> {
    /// Fan-in scaled uniform weights, zero biases, deterministic in `seed`.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        let shapes = spec.parameter_shapes();
        for (i, (name, shape)) in shapes.into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![T::zero(); n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut r = rng::stream(seed, &[0x1417, i as u64]);
                (0..n)
                    .map(|_| T::from_f64_lossy(r.random_range(-bound..bound)))
                    .collect()
            };
            params.push(ParamTensor::new(name, Tensor::from_vec(shape, data)?));
        }
        Ok(Self { spec, params })
    }

    pub(crate) fn from_parts(spec: NetworkSpec, params: Vec<ParamTensor<T>>) -> Result<Self> {
        spec.validate()?;
        let expected = spec.parameter_shapes();
        if expected.len() != params.len() {
            return Err(SegnetError::Format(format!(
                "spec needs {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if &p.name != name || p.value.shape() != &shape[..] {
                return Err(SegnetError::ShapeMismatch {
                    name: p.name.clone(),
                    expected: shape.clone(),
                    found: p.value.shape().to_vec(),
                });
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[ParamTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn split(&self) -> ParamGroupSplit {
        let (head, backbone): (Vec<_>, Vec<_>) = self
            .params
            .iter()
            .map(|p| p.name.clone())
            .partition(|n| is_head_param(n));
        ParamGroupSplit { backbone, head }
    }

    /// Marks only the head trainable.
    pub fn freeze_backbone(&mut self) {
        for p in &mut self.params {
            p.trainable = is_head_param(&p.name);
        }
    }

    pub fn unfreeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = true;
        }
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| ParamTensor {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    /// Records the network on `tape` for an input of shape `(1, D, H, W)` with
    /// every spatial dim divisible by 16.
    pub fn forward(&self, tape: &mut Tape<T>, input: Var) -> Result<ForwardPass> {
        let [_, d, h, w] = tape.value(input).expect_rank4("network input")?;
        if [d, h, w].iter().any(|n| n % 16 != 0) {
            return Err(SegnetError::IndivisibleDims([d, h, w]));
        }
        let vars = self.record_params(tape);
        let probabilities = self.forward_with(tape, input, &vars)?;
        Ok(ForwardPass {
            probabilities,
            params: vars,
        })
    }

    /// Records every parameter as a leaf, trainable ones requiring gradients.
    pub fn record_params(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), p.trainable))
            .collect()
    }

    /// Forward pass reusing parameter leaves from [`Model::record_params`], so
    /// that several inputs on one tape share (and sum) parameter gradients.
    pub fn forward_with(&self, tape: &mut Tape<T>, input: Var, vars: &[Var]) -> Result<Var> {
        let [_, d, h, w] = tape.value(input).expect_rank4("network input")?;
        if [d, h, w].iter().any(|n| n % 16 != 0) {
            return Err(SegnetError::IndivisibleDims([d, h, w]));
        }
        if vars.len() != self.params.len() {
            return Err(SegnetError::Format(format!(
                "expected {} parameter handles, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        let wb = |i: usize| (vars[2 * i], vars[2 * i + 1]);

        let mut skips = vec![input];
        let mut x = input;
        for l in 0..RESOLUTIONS {
            let (w, b) = wb(l);
            let y = tape.conv3d(x, w, b, 2)?;
            x = tape.relu(y);
            skips.push(x);
        }
        skips.pop();
        for l in 0..RESOLUTIONS {
            let (w, b) = wb(RESOLUTIONS + l);
            let y = tape.conv3d(x, w, b, 1)?;
            let y = tape.relu(y);
            let y = tape.upsample2(y)?;
            let skip = skips.pop().expect("one skip per level");
            x = tape.concat_channels(y, skip)?;
        }
        for i in 0..self.spec.n_fc_layers {
            let (w, b) = wb(2 * RESOLUTIONS + i);
            x = tape.conv1x1(x, w, b)?;
            if i + 1 < self.spec.n_fc_layers {
                x = tape.relu(x);
            }
        }
        Ok(tape.softmax_channels(x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_closed_form() {
        let a = NetworkSpec::new(Variant::BaseA);
        let b = NetworkSpec::new(Variant::BaseB);
        let [c0, c1, c2, c3] = a.channels;
        let conv = |co: usize, ci: usize| co * ci * 27 + co;
        let backbone = conv(c0, 1)
            + conv(c1, c0)
            + conv(c2, c1)
            + conv(c3, c2)
            + conv(c3, c3)
            + conv(c2, c3 + c2)
            + conv(c1, c2 + c1)
            + conv(c0, c1 + c0);
        let fin = c0 + 1;
        let f = a.fc_width;
        assert_eq!(a.parameter_count(), backbone + fin * 5 + 5);
        assert_eq!(
            b.parameter_count(),
            backbone + (fin * f + f) + (f * f + f) + (f * 5 + 5)
        );
        assert_eq!(
            a.parameter_count(),
            b.parameter_count() - (fin * f + f) - (f * f + f) - (f * 5 + 5) + (fin * 5 + 5)
        );
    }

    #[test]
    fn spec_validation() {
        let mut s = NetworkSpec::new(Variant::BaseA);
        s.n_fc_layers = 2;
        assert!(matches!(Model::<f32>::build(s, 0), Err(SegnetError::InvalidSpec(_))));
        let mut s = NetworkSpec::new(Variant::BaseA);
        s.channels = [32, 16, 64, 128];
        assert!(s.validate().is_err());
        let mut s = NetworkSpec::new(Variant::BaseA);
        s.n_classes = 2;
        assert!(s.validate().is_err());
    }

    #[test]
    fn split_is_partition_with_dense_head() {
        let m = Model::<f32>::build(NetworkSpec::new(Variant::BaseB), 1).unwrap();
        let split = m.split();
        assert_eq!(split.head.len(), 6);
        assert_eq!(split.head.len() + split.backbone.len(), m.params().len());
        for p in m.params() {
            let in_head = split.head.contains(&p.name);
            assert_ne!(in_head, split.backbone.contains(&p.name));
            let is_1x1 = p.value.shape().len() == 5 && p.value.shape()[2..] == [1, 1, 1];
            let is_head_bias = p.name.starts_with("head") && p.name.ends_with("bias");
            assert_eq!(in_head, is_1x1 || is_head_bias, "{}", p.name);
        }
    }

    #[test]
    fn build_is_deterministic() {
        let s = NetworkSpec::new(Variant::BaseA);
        let a = Model::<f32>::build(s.clone(), 9).unwrap();
        let b = Model::<f32>::build(s.clone(), 9).unwrap();
        let c = Model::<f32>::build(s, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn forward_shape_and_normalisation() {
        let m = Model::<f32>::build(NetworkSpec::new(Variant::BaseB), 3).unwrap();
        let mut tape = Tape::new();
        let data = (0..4096).map(|i| ((i * 37) % 101) as f32 / 50.0 - 1.0).collect();
        let x = tape.constant(Tensor::from_vec(vec![1, 16, 16, 16], data).unwrap());
        let out = m.forward(&mut tape, x).unwrap();
        let p = tape.value(out.probabilities);
        assert_eq!(p.shape(), &[5, 16, 16, 16]);
        for v in 0..4096 {
            let s: f32 = (0..5).map(|c| p.data()[c * 4096 + v]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn indivisible_patch_rejected() {
        let m = Model::<f32>::build(NetworkSpec::new(Variant::BaseA), 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 15, 16, 16]));
        assert!(matches!(
            m.forward(&mut tape, x),
            Err(SegnetError::IndivisibleDims([15, 16, 16]))
        ));
    }
}
