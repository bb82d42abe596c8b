//! Forward and adjoint kernels on raw buffers.

use super::Real;

/// Spatial description of a 3x3x3 (or 1x1x1) same-padded convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub stride: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, input: [usize; 3], stride: usize) -> Self {
        Self {
            c_in,
            input,
            output: input.map(|n| n.div_ceil(stride)),
            stride,
        }
    }

    pub fn n_out(&self) -> usize {
        self.output.iter().product()
    }

    pub fn rows(&self) -> usize {
        self.c_in * 27
    }

    /// Source index along one axis for output `o` and tap `k`, if in bounds.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, n: usize) -> Option<usize> {
        let i = (o * stride + k) as isize - 1;
        (i >= 0 && (i as usize) < n).then_some(i as usize)
    }
}

/// Unfolds the 27 taps of every output voxel into a `(C_in*27) x N_out` matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut Vec<T>) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let n_out = g.n_out();
    cols.clear();
    cols.resize(g.rows() * n_out, T::zero());
    let s = g.stride;
    for c in 0..g.c_in {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kd in 0..3 {
            for kh in 0..3 {
                for kw in 0..3 {
                    let row = ((c * 3 + kd) * 3 + kh) * 3 + kw;
                    let dst = &mut cols[row * n_out..(row + 1) * n_out];
                    for z in 0..od {
                        let Some(sz) = ConvGeom::source(z, kd, s, id) else {
                            continue;
                        };
                        for y in 0..oh {
                            let Some(sy) = ConvGeom::source(y, kh, s, ih) else {
                                continue;
                            };
                            let src = &xc[(sz * ih + sy) * iw..(sz * ih + sy + 1) * iw];
                            let out = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            if s == 1 {
                                // contiguous shift by kw - 1 with zero edges
                                match kw {
                                    0 => out[1..].copy_from_slice(&src[..iw - 1]),
                                    1 => out.copy_from_slice(src),
                                    _ => out[..ow - 1].copy_from_slice(&src[1..]),
                                }
                            } else {
                                for (xo, o) in out.iter_mut().enumerate() {
                                    if let Some(sx) = ConvGeom::source(xo, kw, s, iw) {
                                        *o = src[sx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let n_out = g.n_out();
    let s = g.stride;
    for c in 0..g.c_in {
        let dxc = &mut dx[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kd in 0..3 {
            for kh in 0..3 {
                for kw in 0..3 {
                    let row = ((c * 3 + kd) * 3 + kh) * 3 + kw;
                    let srcrow = &cols[row * n_out..(row + 1) * n_out];
                    for z in 0..od {
                        let Some(sz) = ConvGeom::source(z, kd, s, id) else {
                            continue;
                        };
                        for y in 0..oh {
                            let Some(sy) = ConvGeom::source(y, kh, s, ih) else {
                                continue;
                            };
                            let dst = &mut dxc[(sz * ih + sy) * iw..(sz * ih + sy + 1) * iw];
                            let grad = &srcrow[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            if s == 1 {
                                match kw {
                                    0 => add_into(&mut dst[..iw - 1], &grad[1..]),
                                    1 => add_into(dst, grad),
                                    _ => add_into(&mut dst[1..], &grad[..ow - 1]),
                                }
                            } else {
                                for (xo, &g) in grad.iter().enumerate() {
                                    if let Some(sx) = ConvGeom::source(xo, kw, s, iw) {
                                        dst[sx] += g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `out[c] = bias[c] + W[c,:] . cols` for a `(C_out x K)` weight matrix.
pub(crate) fn dense_forward<T: Real>(
    w: &[T],
    bias: &[T],
    cols: &[T],
    c_out: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(c_out * n);
    for &b in bias {
        out.extend(std::iter::repeat_n(b, n));
    }
    T::gemm(c_out, k, n, w, false, cols, false, T::one(), &mut out);
    out
}

/// Accumulates `dW += dOut . cols^T` and `db += rowsum(dOut)`.
pub(crate) fn dense_param_grads<T: Real>(
    dout: &[T],
    cols: &[T],
    c_out: usize,
    k: usize,
    n: usize,
    dw: &mut [T],
    db: &mut [T],
) {
    T::gemm(c_out, n, k, dout, false, cols, true, T::one(), dw);
    for (c, b) in db.iter_mut().enumerate() {
        *b += dout[c * n..(c + 1) * n].iter().copied().sum::<T>();
    }
}

/// `dCols = W^T . dOut`.
pub(crate) fn dense_input_grad<T: Real>(
    w: &[T],
    dout: &[T],
    c_out: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut dcols = vec![T::zero(); k * n];
    T::gemm(k, c_out, n, w, true, dout, false, T::zero(), &mut dcols);
    dcols
}

pub(crate) fn upsample2<T: Real>(x: &[T], shape: [usize; 4]) -> Vec<T> {
    let [c, d, h, w] = shape;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![T::zero(); c * od * oh * ow];
    for ci in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let src = &x[((ci * d + z / 2) * h + y / 2) * w..][..w];
                let dst = &mut out[((ci * od + z) * oh + y) * ow..][..ow];
                for (xo, o) in dst.iter_mut().enumerate() {
                    *o = src[xo / 2];
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: 2x2x2 sum pooling of the upstream gradient.
pub(crate) fn upsample2_adjoint<T: Real>(g: &[T], shape: [usize; 4], dx: &mut [T]) {
    let [c, d, h, w] = shape;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    for ci in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let src = &g[((ci * od + z) * oh + y) * ow..][..ow];
                let dst = &mut dx[((ci * d + z / 2) * h + y / 2) * w..][..w];
                for (xo, &v) in src.iter().enumerate() {
                    dst[xo / 2] += v;
                }
            }
        }
    }
}

/// Channel softmax with per-voxel max subtraction.
pub(crate) fn softmax_channels<T: Real>(x: &[T], c: usize, n: usize) -> Vec<T> {
    let mut max = x[..n].to_vec();
    for ci in 1..c {
        for (m, &v) in max.iter_mut().zip(&x[ci * n..(ci + 1) * n]) {
            if v > *m {
                *m = v;
            }
        }
    }
    let mut out = vec![T::zero(); c * n];
    let mut sum = vec![T::zero(); n];
    for ci in 0..c {
        let dst = &mut out[ci * n..(ci + 1) * n];
        for (((o, &v), &m), s) in dst
            .iter_mut()
            .zip(&x[ci * n..(ci + 1) * n])
            .zip(&max)
            .zip(sum.iter_mut())
        {
            *o = (v - m).exp();
            *s += *o;
        }
    }
    for ci in 0..c {
        for (o, &s) in out[ci * n..(ci + 1) * n].iter_mut().zip(&sum) {
            *o = *o / s;
        }
    }
    out
}

/// `dx_c = p_c (g_c - sum_k g_k p_k)` per voxel.
pub(crate) fn softmax_adjoint<T: Real>(p: &[T], g: &[T], c: usize, n: usize, dx: &mut [T]) {
    let mut dot = vec![T::zero(); n];
    for ci in 0..c {
        for ((d, &pv), &gv) in dot
            .iter_mut()
            .zip(&p[ci * n..(ci + 1) * n])
            .zip(&g[ci * n..(ci + 1) * n])
        {
            *d += pv * gv;
        }
    }
    for ci in 0..c {
        let r = ci * n..(ci + 1) * n;
        for (((d, &pv), &gv), &s) in dx[r.clone()]
            .iter_mut()
            .zip(&p[r.clone()])
            .zip(&g[r])
            .zip(&dot)
        {
            *d += pv * (gv - s);
        }
    }
}

/// Per-class sums used by the soft Dice loss: (intersection, prediction mass,
/// target mass), accumulated in double precision.
pub(crate) fn dice_stats<T: Real>(p: &[T], t: &[T], c: usize, n: usize) -> Vec<(f64, f64, f64)> {
    (0..c)
        .map(|ci| {
            let r = ci * n..(ci + 1) * n;
            p[r.clone()]
                .iter()
                .zip(&t[r])
                .fold((0.0, 0.0, 0.0), |(i, sp, st), (&pv, &tv)| {
                    let (pv, tv) = (pv.as_f64(), tv.as_f64());
                    (i + pv * tv, sp + pv, st + tv)
                })
        })
        .collect()
}

pub(crate) fn dice_value(stats: &[(f64, f64, f64)], eps: f64) -> f64 {
    let mean = stats
        .iter()
        .map(|&(i, sp, st)| (2.0 * i + eps) / (sp + st + eps))
        .sum::<f64>()
        / stats.len() as f64;
    1.0 - mean
}

/// Gradient of the Dice loss with respect to the probabilities, scaled by the
/// upstream scalar gradient.
pub(crate) fn dice_adjoint<T: Real>(
    stats: &[(f64, f64, f64)],
    t: &[T],
    n: usize,
    eps: f64,
    upstream: f64,
    dp: &mut [T],
) {
    let c = stats.len() as f64;
    for (ci, &(i, sp, st)) in stats.iter().enumerate() {
        let den = sp + st + eps;
        let num = 2.0 * i + eps;
        // d/dp [num/den] = (2 t den - num) / den^2
        let scale = -upstream / (c * den * den);
        let r = ci * n..(ci + 1) * n;
        for (d, &tv) in dp[r.clone()].iter_mut().zip(&t[r]) {
            *d += T::from_f64_lossy(scale * (2.0 * tv.as_f64() * den - num));
        }
    }
}
