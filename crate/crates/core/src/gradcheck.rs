//! Central finite-difference checks of every tape op and of both networks.
//!
//! Each check builds a small random problem from a seed and returns the
//! relative error between the tape's gradient and finite differences.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::rng::{self, StreamRng};
use crate::segnet::{Model, NetworkSpec, Variant};

fn randn<T: Real>(r: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(StandardNormal.sample(r))).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero so no finite-difference step crosses a ReLU kink.
fn randn_off_zero<T: Real>(r: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    randn::<f64>(r, shape)
        .map(|v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v })
        .cast()
}

/// Random per-voxel distributions over the channels.
pub fn soft_target<T: Real>(r: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    let [c, d, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    let n = d * h * w;
    let raw: Vec<f64> = (0..c * n).map(|_| r.random_range(0.05..1.0)).collect();
    let mut data = vec![T::zero(); c * n];
    for v in 0..n {
        let s: f64 = (0..c).map(|k| raw[k * n + v]).sum();
        for k in 0..c {
            data[k * n + v] = T::from_f64_lossy(raw[k * n + v] / s);
        }
    }
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Fixed smooth reduction of a rank-4 node to a scalar: a random channel
/// mixing to three channels, softmax, and Dice against a soft target.
#[derive(Clone)]
struct Reducer<T> {
    w: Tensor<T>,
    b: Tensor<T>,
    target: Tensor<T>,
}

impl<T: Real> Reducer<T> {
    fn new(r: &mut impl Rng, shape: &[usize]) -> Self {
        let c = shape[0];
        Self {
            w: randn(r, &[3, c, 1, 1, 1]),
            b: randn(r, &[3]),
            target: soft_target(r, &[3, shape[1], shape[2], shape[3]]),
        }
    }

    fn apply(&self, tape: &mut Tape<T>, y: Var) -> Var {
        let w = tape.constant(self.w.clone());
        let b = tape.constant(self.b.clone());
        let z = tape.conv1x1(y, w, b).unwrap();
        let p = tape.softmax_channels(z).unwrap();
        tape.dice_loss(p, self.target.clone(), 1e-5).unwrap()
    }
}

type Build<'a, T> = &'a dyn Fn(&mut Tape<T>, &[Var]) -> Var;

fn eval<T: Real>(inputs: &[Tensor<T>], build: Build<T>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.value(loss).data()[0].as_f64()
}

/// Norm-relative error between analytic and central-difference gradients over
/// up to `max_coords` coordinates per input, maximised over inputs.
fn coordinate_check<T: Real>(inputs: &[Tensor<T>], build: Build<T>, h: f64, max_coords: usize, r: &mut impl Rng) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(vars[i]) {
            Some(g) => g.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; input.len()],
        };
        let coords: Vec<usize> = if input.len() <= max_coords {
            (0..input.len()).collect()
        } else {
            sample(r, input.len(), max_coords).into_vec()
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &j in &coords {
            let mut shifted = inputs.to_vec();
            let x0 = input.data()[j].as_f64();
            shifted[i].data_mut()[j] = T::from_f64_lossy(x0 + h);
            let up = eval(&shifted, build);
            shifted[i].data_mut()[j] = T::from_f64_lossy(x0 - h);
            let down = eval(&shifted, build);
            let numeric = (up - down) / (2.0 * h);
            diff += (analytic[j] - numeric).powi(2);
            na += analytic[j].powi(2);
            nn += numeric.powi(2);
        }
        let scale = na.sqrt().max(nn.sqrt());
        if scale > 1e-12 {
            worst = worst.max(diff.sqrt() / scale);
        }
    }
    worst
}

/// Directional variant for large graphs: for every input, compares the
/// analytic derivative along random unit directions, each supported on at most
/// `support` coordinates, with a central difference along the same direction.
/// The step grows as the derivative shrinks so round-off of the O(1) loss
/// stays near 1e-5 relative. A direction whose central differences at `h` and
/// `h/2` disagree beyond 3e-5 relative straddles a ReLU kink, where finite
/// differences are meaningless, and is redrawn. Returns infinity when every
/// draw for some input hits a kink.
fn directional_check(inputs: &[Tensor<f64>], build: Build<f64>, directions: usize, support: usize, r: &mut impl Rng) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let Some(grad) = tape.grad(vars[i]) else {
            return f64::INFINITY;
        };
        let mut checked = 0;
        let mut redrawn = 0;
        while checked < directions {
            let mut d = vec![0.0; input.len()];
            for j in sample(r, input.len(), support.min(input.len())) {
                d[j] = StandardNormal.sample(r);
            }
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            d.iter_mut().for_each(|v| *v /= norm);
            let analytic: f64 = grad.iter().zip(&d).map(|(g, v)| g * v).sum();
            let mut shifted = inputs.to_vec();
            let mut at = |step: f64| {
                for ((s, &x), &v) in shifted[i].data_mut().iter_mut().zip(input.data()).zip(&d) {
                    *s = x + step * v;
                }
                eval(&shifted, build)
            };
            let h = (1e-11 / analytic.abs()).clamp(1e-8, 1e-3);
            let wide = (at(h) - at(-h)) / (2.0 * h);
            let narrow = (at(h / 2.0) - at(-h / 2.0)) / h;
            let scale = analytic.abs().max(narrow.abs());
            if scale <= 1e-12 {
                checked += 1;
                continue;
            }
            if (wide - narrow).abs() > 3e-5 * scale {
                redrawn += 1;
                if redrawn > 50 {
                    return f64::INFINITY;
                }
                continue;
            }
            worst = worst.max((analytic - narrow).abs() / scale);
            checked += 1;
        }
    }
    worst
}

/// The checked computations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    Conv3dStride1,
    Conv3dStride2,
    Conv1x1,
    Relu,
    Upsample2,
    Concat,
    Softmax,
    Dice,
    SumMean,
    /// Narrow copy of the base_a graph (channels 2,3,4,4; FC width 4).
    NetworkA,
    NetworkB,
}

impl Check {
    pub const ALL: [Check; 11] = [
        Check::Conv3dStride1,
        Check::Conv3dStride2,
        Check::Conv1x1,
        Check::Relu,
        Check::Upsample2,
        Check::Concat,
        Check::Softmax,
        Check::Dice,
        Check::SumMean,
        Check::NetworkA,
        Check::NetworkB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::Conv3dStride1 => "conv3d stride 1",
            Check::Conv3dStride2 => "conv3d stride 2",
            Check::Conv1x1 => "conv1x1",
            Check::Relu => "relu",
            Check::Upsample2 => "upsample2",
            Check::Concat => "concat",
            Check::Softmax => "softmax",
            Check::Dice => "dice loss",
            Check::SumMean => "sum and mean",
            Check::NetworkA => "base_a graph",
            Check::NetworkB => "base_b graph",
        }
    }

    /// Relative gradient error in double precision for one seed.
    pub fn run(self, seed: u64) -> f64 {
        let r = &mut rng::stream(seed, &[77]);
        match self {
            Check::Conv3dStride1 => conv_case::<f64>(r, 1, 1e-6),
            Check::Conv3dStride2 => conv_case::<f64>(r, 2, 1e-6),
            Check::Conv1x1 => {
                let x: Tensor<f64> = randn(r, &[4, 3, 2, 5]);
                let w = randn(r, &[2, 4, 1, 1, 1]);
                let b = randn(r, &[2]);
                let red = Reducer::new(r, &[2, 3, 2, 5]);
                let build = move |t: &mut Tape<f64>, v: &[Var]| {
                    let y = t.conv1x1(v[0], v[1], v[2]).unwrap();
                    red.apply(t, y)
                };
                coordinate_check(&[x, w, b], &build, 1e-6, 400, r)
            }
            Check::Relu => {
                let x: Tensor<f64> = randn_off_zero(r, &[2, 3, 3, 3]);
                let red = Reducer::new(r, &[2, 3, 3, 3]);
                let build = move |t: &mut Tape<f64>, v: &[Var]| {
                    let y = t.relu(v[0]);
                    red.apply(t, y)
                };
                coordinate_check(&[x], &build, 1e-6, 400, r)
            }
            Check::Upsample2 => {
                let x: Tensor<f64> = randn(r, &[2, 2, 3, 2]);
                let red = Reducer::new(r, &[2, 4, 6, 4]);
                let build = move |t: &mut Tape<f64>, v: &[Var]| {
                    let y = t.upsample2(v[0]).unwrap();
                    red.apply(t, y)
                };
                coordinate_check(&[x], &build, 1e-6, 400, r)
            }
            Check::Concat => {
                let a: Tensor<f64> = randn(r, &[2, 3, 2, 2]);
                let b = randn(r, &[1, 3, 2, 2]);
                let red = Reducer::new(r, &[3, 3, 2, 2]);
                let build = move |t: &mut Tape<f64>, v: &[Var]| {
                    let y = t.concat_channels(v[0], v[1]).unwrap();
                    red.apply(t, y)
                };
                coordinate_check(&[a, b], &build, 1e-6, 400, r)
            }
            Check::Softmax => {
                let x: Tensor<f64> = randn(r, &[5, 3, 3, 2]);
                let target = soft_target(r, &[5, 3, 3, 2]);
                let build = move |t: &mut Tape<f64>, v: &[Var]| {
                    let p = t.softmax_channels(v[0]).unwrap();
                    t.dice_loss(p, target.clone(), 1e-5).unwrap()
                };
                coordinate_check(&[x], &build, 1e-6, 400, r)
            }
            Check::Dice => {
                let p: Tensor<f64> = soft_target(r, &[5, 4, 3, 2]);
                let target = soft_target(r, &[5, 4, 3, 2]);
                let build = move |t: &mut Tape<f64>, v: &[Var]| t.dice_loss(v[0], target.clone(), 1e-5).unwrap();
                coordinate_check(&[p], &build, 1e-6, 400, r)
            }
            Check::SumMean => {
                let a: Tensor<f64> = randn(r, &[2, 2, 2, 2]);
                let b = randn(r, &[1, 2, 3, 1]);
                let red = Reducer::new(r, &[2, 2, 2, 2]);
                let build = move |t: &mut Tape<f64>, v: &[Var]| {
                    let sa = red.apply(t, v[0]);
                    let sb = t.sum(v[1]);
                    t.mean(&[sa, sb, sa]).unwrap()
                };
                coordinate_check(&[a, b], &build, 1e-6, 400, r)
            }
            Check::NetworkA => network_case(Variant::BaseA, [2, 3, 4, 4], 4, r, 2),
            Check::NetworkB => network_case(Variant::BaseB, [2, 3, 4, 4], 4, r, 2),
        }
    }
}

fn conv_case<T: Real>(r: &mut StreamRng, stride: usize, h: f64) -> f64 {
    let x: Tensor<T> = randn(r, &[2, 5, 4, 3]);
    let w: Tensor<T> = randn(r, &[3, 2, 3, 3, 3]);
    let b: Tensor<T> = randn(r, &[3]);
    let out = [3, 5usize.div_ceil(stride), 4usize.div_ceil(stride), 3usize.div_ceil(stride)];
    let red = Reducer::new(r, &out);
    let build = move |t: &mut Tape<T>, v: &[Var]| {
        let y = t.conv3d(v[0], v[1], v[2], stride).unwrap();
        red.apply(t, y)
    };
    coordinate_check(&[x, w, b], &build, h, 400, r)
}

/// Stride-1 convolution in single precision with a step suited to f32.
pub fn conv3d_single_precision(seed: u64) -> f64 {
    conv_case::<f32>(&mut rng::stream(seed, &[77]), 1, 1e-2)
}

/// Every parameter and the input of a network on a 16^3 input, along
/// `directions` random single-coordinate directions each.
fn network_case(variant: Variant, channels: [usize; 4], fc_width: usize, r: &mut StreamRng, directions: usize) -> f64 {
    let mut spec = NetworkSpec::new(variant);
    spec.channels = channels;
    spec.fc_width = fc_width;
    let side = spec.patch_size;
    let model = Model::<f64>::build(spec, r.random()).unwrap();
    let mut inputs: Vec<Tensor<f64>> = model.params().iter().map(|p| p.value.clone()).collect();
    // non-zero biases so every parameter receives a generic gradient
    for t in inputs.iter_mut().filter(|t| t.shape().len() == 1) {
        for v in t.data_mut() {
            *v = r.random_range(-0.1..0.1);
        }
    }
    inputs.push(randn(r, &[1, side, side, side]));
    let target = soft_target(r, &[5, side, side, side]);
    let n_params = model.params().len();
    let build = move |t: &mut Tape<f64>, v: &[Var]| {
        let p = model.forward_with(t, v[n_params], &v[..n_params]).unwrap();
        t.dice_loss(p, target.clone(), 1e-5).unwrap()
    };
    directional_check(&inputs, &build, directions, 1, r)
}

/// The default-width graph of `variant`, four directions per input.
pub fn full_width_network(variant: Variant, seed: u64) -> f64 {
    let spec = NetworkSpec::new(variant);
    network_case(variant, spec.channels, spec.fc_width, &mut rng::stream(seed, &[variant as u64]), 4)
}
