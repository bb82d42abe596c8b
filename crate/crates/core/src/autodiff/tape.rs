use super::kernels::{self, ConvGeom};
use super::{AutodiffError, Real, Result, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        kernel: usize,
    },
    Relu(Var),
    Upsample2(Var),
    Concat(Var, Var),
    Softmax(Var),
    Dice {
        p: Var,
        target: Tensor<T>,
        eps: f64,
        stats: Vec<(f64, f64, f64)>,
    },
    Sum(Var),
    Mean(Vec<Var>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records a forward pass in execution order and replays it backwards.
///
/// A node requires a gradient iff at least one of its inputs does, so frozen
/// sub-graphs cost nothing in the backward pass. A tape supports exactly one
/// backward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or(AutodiffError::UnknownVar(v.0))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient; `None` for nodes that do not require one or were
    /// not reached by the backward pass.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0)?.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Same-padded 3x3x3 convolution with weights `(C_out, C_in, 3, 3, 3)`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        if stride != 1 && stride != 2 {
            return Err(AutodiffError::UnsupportedStride(stride));
        }
        self.conv(x, w, b, stride, 3)
    }

    /// Per-voxel dense layer: a 1x1x1 convolution with weights `(C_out, C_in, 1, 1, 1)`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.conv(x, w, b, 1, 1)
    }

    fn conv(&mut self, x: Var, w: Var, b: Var, stride: usize, kernel: usize) -> Result<Var> {
        let [c_in, d, h, wd] = self.node(x)?.value.expect_rank4("conv input")?;
        let wshape = self.node(w)?.value.shape().to_vec();
        let (c_out, w_in) = match wshape[..] {
            [co, ci, k0, k1, k2] if [k0, k1, k2] == [kernel; 3] => (co, ci),
            _ => {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "weights must be (C_out, C_in, {kernel}, {kernel}, {kernel}), got {wshape:?}"
                )))
            }
        };
        if w_in != c_in {
            return Err(AutodiffError::ChannelMismatch {
                expected: w_in,
                found: c_in,
            });
        }
        if self.node(b)?.value.shape() != [c_out] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "bias must be ({c_out}), got {:?}",
                self.value(b).shape()
            )));
        }
        let geom = ConvGeom::new(c_in, [d, h, wd], stride);
        let n = geom.n_out();
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let out = if kernel == 3 {
            let mut cols = Vec::new();
            kernels::im2col(xv, &geom, &mut cols);
            kernels::dense_forward(wv, bv, &cols, c_out, geom.rows(), n)
        } else {
            kernels::dense_forward(wv, bv, xv, c_out, c_in, n)
        };
        let [od, oh, ow] = geom.output;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::from_vec(vec![c_out, od, oh, ow], out)?,
            rg,
            Op::Conv {
                x,
                w,
                b,
                geom,
                kernel,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let zero = T::zero();
        let value = self.value(x).map(|v| if v > zero { v } else { zero });
        let rg = self.rg(x);
        self.push(value, rg, Op::Relu(x))
    }

    /// Nearest-neighbour 2x2x2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let shape = self.node(x)?.value.expect_rank4("upsample input")?;
        let out = kernels::upsample2(self.value(x).data(), shape);
        let [c, d, h, w] = shape;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(vec![c, 2 * d, 2 * h, 2 * w], out)?,
            rg,
            Op::Upsample2(x),
        ))
    }

    /// Channel concatenation, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ca, da, ha, wa] = self.node(a)?.value.expect_rank4("concat input")?;
        let [cb, db, hb, wb] = self.node(b)?.value.expect_rank4("concat input")?;
        if (da, ha, wa) != (db, hb, wb) {
            return Err(AutodiffError::ShapeMismatch(format!(
                "spatial dims differ: {:?} vs {:?}",
                (da, ha, wa),
                (db, hb, wb)
            )));
        }
        let mut data = Vec::with_capacity((ca + cb) * da * ha * wa);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_vec(vec![ca + cb, da, ha, wa], data)?,
            rg,
            Op::Concat(a, b),
        ))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let [c, d, h, w] = self.node(x)?.value.expect_rank4("softmax input")?;
        let out = kernels::softmax_channels(self.value(x).data(), c, d * h * w);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(vec![c, d, h, w], out)?,
            rg,
            Op::Softmax(x),
        ))
    }

    /// `1 - mean_c (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)` over all channels.
    pub fn dice_loss(&mut self, p: Var, target: Tensor<T>, eps: f64) -> Result<Var> {
        let shape = self.node(p)?.value.expect_rank4("dice prediction")?;
        if target.shape() != shape {
            return Err(AutodiffError::ShapeMismatch(format!(
                "prediction {:?} vs target {:?}",
                shape,
                target.shape()
            )));
        }
        let [c, d, h, w] = shape;
        let stats = kernels::dice_stats(self.value(p).data(), target.data(), c, d * h * w);
        let loss = kernels::dice_value(&stats, eps);
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(loss)),
            rg,
            Op::Dice {
                p,
                target,
                eps,
                stats,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(AutodiffError::ShapeMismatch("mean of no values".into()));
        }
        let mut total = 0.0;
        for &x in xs {
            let node = self.node(x)?;
            if node.value.len() != 1 {
                return Err(AutodiffError::NotScalar(node.value.shape().to_vec()));
            }
            total += node.value.data()[0].as_f64();
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(total / xs.len() as f64)),
            rg,
            Op::Mean(xs.to_vec()),
        ))
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let n = node.value.len();
        let g = node.grad.get_or_insert_with(|| vec![T::zero(); n]);
        f(g);
    }

    /// Reverse pass from a scalar loss. Gradients accumulate additively at
    /// fan-out; only nodes that require a gradient are written.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(AutodiffError::AlreadyBackpropagated);
        }
        let node = self.node(loss)?;
        if node.value.len() != 1 {
            return Err(AutodiffError::NotScalar(node.value.shape().to_vec()));
        }
        let requires_grad = node.requires_grad;
        self.consumed = true;
        if !requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            // Take the op out so inputs can be borrowed mutably.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, op: &Op<T>, g: &[T]) {
        match op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                geom,
                kernel,
            } => {
                let c_out = self.nodes[i].value.shape()[0];
                let n = geom.n_out();
                let k = if *kernel == 3 { geom.rows() } else { geom.c_in };
                let need_cols = self.rg(*w);
                let cols = if need_cols && *kernel == 3 {
                    let mut cols = Vec::new();
                    kernels::im2col(self.value(*x).data(), geom, &mut cols);
                    Some(cols)
                } else {
                    None
                };
                if self.rg(*w) || self.rg(*b) {
                    let mut dw = vec![T::zero(); c_out * k];
                    let mut db = vec![T::zero(); c_out];
                    let cols_ref: &[T] = match &cols {
                        Some(c) => c,
                        None => self.value(*x).data(),
                    };
                    if self.rg(*w) {
                        kernels::dense_param_grads(g, cols_ref, c_out, k, n, &mut dw, &mut db);
                    } else {
                        for (c, bv) in db.iter_mut().enumerate() {
                            *bv = g[c * n..(c + 1) * n].iter().copied().sum();
                        }
                    }
                    self.accumulate(*w, |acc| add_assign(acc, &dw));
                    self.accumulate(*b, |acc| add_assign(acc, &db));
                }
                if self.rg(*x) {
                    let dcols = kernels::dense_input_grad(self.value(*w).data(), g, c_out, k, n);
                    if *kernel == 3 {
                        let geom = *geom;
                        self.accumulate(*x, |acc| kernels::col2im(&dcols, &geom, acc));
                    } else {
                        self.accumulate(*x, |acc| add_assign(acc, &dcols));
                    }
                }
            }
            Op::Relu(x) => {
                let out = self.nodes[i].value.data();
                let zero = T::zero();
                let dx: Vec<T> = out
                    .iter()
                    .zip(g)
                    .map(|(&o, &gv)| if o > zero { gv } else { zero })
                    .collect();
                self.accumulate(*x, |acc| add_assign(acc, &dx));
            }
            Op::Upsample2(x) => {
                let shape = self.value(*x).expect_rank4("upsample input").expect("checked");
                self.accumulate(*x, |acc| kernels::upsample2_adjoint(g, shape, acc));
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                self.accumulate(*a, |acc| add_assign(acc, &g[..na]));
                self.accumulate(*b, |acc| add_assign(acc, &g[na..]));
            }
            Op::Softmax(x) => {
                let shape = self.nodes[i].value.shape().to_vec();
                let (c, n) = (shape[0], shape[1..].iter().product());
                let mut dx = vec![T::zero(); c * n];
                kernels::softmax_adjoint(self.nodes[i].value.data(), g, c, n, &mut dx);
                self.accumulate(*x, |acc| add_assign(acc, &dx));
            }
            Op::Dice {
                p,
                target,
                eps,
                stats,
            } => {
                let n = target.voxels();
                let up = g[0].as_f64();
                self.accumulate(*p, |acc| {
                    kernels::dice_adjoint(stats, target.data(), n, *eps, up, acc)
                });
            }
            Op::Sum(x) => {
                let gv = g[0];
                self.accumulate(*x, |acc| acc.iter_mut().for_each(|a| *a += gv));
            }
            Op::Mean(xs) => {
                let share = g[0] / T::from_usize(xs.len()).expect("count fits");
                for &x in xs {
                    self.accumulate(x, |acc| acc[0] += share);
                }
            }
        }
    }
}

fn add_assign<T: Real>(acc: &mut [T], g: &[T]) {
    for (a, &v) in acc.iter_mut().zip(g) {
        *a += v;
    }
}
