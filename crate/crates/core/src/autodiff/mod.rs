//! Tape-based reverse-mode differentiation with the layer set used by the
//! segmentation networks: strided 3x3x3 convolution, 1x1x1 convolution, ReLU,
//! nearest-neighbour 2x upsampling, channel concatenation, channel softmax and
//! the soft Dice loss.
//!
//! Activations are 4-D `(C, D, H, W)` tensors without a batch axis. The engine
//! is generic over [`Real`] so the same graph runs in `f32` for training and
//! in `f64` for finite-difference verification.

mod kernels;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

pub use tape::{Tape, Var};

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("expected {expected} input channels, got {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("unsupported stride {0}; only 1 and 2 are supported")]
    UnsupportedStride(usize),
    #[error("backward called on a non-scalar node of shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable {0} was not recorded on this tape")]
    UnknownVar(usize),
    #[error("backward already ran on this tape; record a new forward pass first")]
    AlreadyBackpropagated,
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Floating-point element type of the engine.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Width tag used by the checkpoint format.
    const BYTES: usize;

    /// `c = op(a) * op(b) + beta * c` on row-major buffers, where `op(a)` is
    /// `m x k` and `op(b)` is `k x n`. A transposed operand is stored in its
    /// transposed (row-major) layout.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_transposed: bool,
        b: &[Self],
        b_transposed: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8>;
    fn from_le_chunk(bytes: &[u8]) -> Self;
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $bytes:expr, $gemm:path) => {
        impl Real for $t {
            const BYTES: usize = $bytes;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_transposed: bool,
                b: &[Self],
                b_transposed: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, a_transposed);
                let (rsb, csb) = strides(k, n, b_transposed);
                // SAFETY: the assertion above guarantees every index reached
                // through these strides lies inside the three buffers.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn to_le_bytes_vec(values: &[Self]) -> Vec<u8> {
                values.iter().flat_map(|v| v.to_le_bytes()).collect()
            }

            fn from_le_chunk(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("chunk width"))
            }
        }
    };
}

impl_real!(f32, 4, matrixmultiply::sgemm);
impl_real!(f64, 8, matrixmultiply::dgemm);

/// Dense row-major tensor. Activations use rank 4 `(C, D, H, W)`; convolution
/// weights use rank 5 `(C_out, C_in, k, k, k)`; biases rank 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "shape {shape:?} needs {n} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Spatial voxel count of a rank-4 tensor.
    pub fn voxels(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Single channel of a rank-4 tensor.
    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn expect_rank4(&self, what: &str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [c, d, h, w] => Ok([c, d, h, w]),
            _ => Err(AutodiffError::ShapeMismatch(format!(
                "{what} must be (C, D, H, W), got {:?}",
                self.shape
            ))),
        }
    }
}

/// A named model parameter. Frozen parameters (`trainable == false`) enter the
/// tape as constants and never receive gradients or optimizer updates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

impl<T: Real> ParamTensor<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            trainable: true,
        }
    }
}

/// Output spatial size of a same-padded convolution.
pub fn conv_output_dim(input: usize, stride: usize) -> usize {
    input.div_ceil(stride)
}
