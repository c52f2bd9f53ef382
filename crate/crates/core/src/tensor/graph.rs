//! Tape of recorded operations and the reverse sweep over it.

use super::conv::{self, ConvDims};
use super::{gemm, nchw, Element, Mat, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Detach,
    Conv2d { x: usize, w: usize, dims: ConvDims },
    ConvTranspose2d { x: usize, w: usize, dims: ConvDims },
    ChannelBias { x: usize, b: usize },
    ChannelScale { x: usize, s: usize },
    ChannelMix { x: usize, w: usize, transposed: bool },
    Relu(usize),
    LeakyRelu(usize, T),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    LogClamped(usize, T),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MulScalarVar { x: usize, s: usize },
    SoftThreshold { x: usize, theta: usize },
    Reshape(usize),
    GlobalAvgPool(usize),
    SumAll(usize),
    MeanAll(usize),
    L1Norm(usize),
    L2Norm(usize),
    FrobeniusSq(usize),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match *self {
            Leaf | Detach => vec![],
            Conv2d { x, w, .. } | ConvTranspose2d { x, w, .. } | ChannelMix { x, w, .. } => {
                vec![x, w]
            }
            ChannelBias { x, b } => vec![x, b],
            ChannelScale { x, s } | MulScalarVar { x, s } => vec![x, s],
            SoftThreshold { x, theta } => vec![x, theta],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![a, b],
            Relu(x) | LeakyRelu(x, _) | Tanh(x) | Sigmoid(x) | Softplus(x) | Exp(x) | LogClamped(x, _)
            | Scale(x, _) | AddScalar(x) | Reshape(x) | GlobalAvgPool(x) | SumAll(x)
            | MeanAll(x) | L1Norm(x) | L2Norm(x) | FrobeniusSq(x) => vec![x],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of a forward computation. Nodes are stored in execution order,
/// so every input of node `k` has an index below `k`.
#[derive(Debug, Default)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Result of [`Graph::backward`]: gradients of every node that required one.
#[derive(Debug)]
pub struct Gradients<T: Element = f32> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.get(v)?;
        Tensor::new(&self.shapes[v.0], g.to_vec()).ok()
    }
}

fn same_shape(a: &[usize], b: &[usize], op: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{op}: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn map<T: Element>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contribution).for_each(|(a, c)| *a += c),
        None => *slot = Some(contribution),
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: usize) -> &[T] {
        self.nodes[v].value.data()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let inputs = op.inputs();
        debug_assert!(
            inputs.is_empty()
                || !inputs.iter().all(|&i| self.nodes[i].value.all_finite())
                || value.all_finite(),
            "op {op:?} produced non-finite output from finite inputs"
        );
        let needs_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => inputs.iter().any(|&i| self.nodes[i].needs_grad),
        };
        // Node values never carry a gradient buffer; gradients come back through `Gradients`.
        let mut value = value;
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Constant input, never differentiated.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.leaf(t)
    }

    /// Trainable leaf holding a copy of `t`'s values.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let copy = Tensor::new(t.shape(), t.data().to_vec())
            .expect("valid tensor")
            .with_grad();
        self.leaf(copy)
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::Detach)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let dims = ConvDims::conv2d(self.shape(x), self.shape(w), stride, pad)?;
        let out = conv::conv2d_forward(self.data(x.0), self.data(w.0), &dims);
        let value = Tensor::new(&dims.conv2d_out_shape(), out)?;
        Ok(self.push(value, Op::Conv2d { x: x.0, w: w.0, dims }))
    }

    /// Transposed convolution; `w` is `[in, out, kh, kw]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let dims = ConvDims::conv_transpose2d(self.shape(x), self.shape(w), stride, pad)?;
        let out = conv::conv_transpose2d_forward(self.data(x.0), self.data(w.0), &dims);
        let value = Tensor::new(&dims.transpose_out_shape(), out)?;
        Ok(self.push(value, Op::ConvTranspose2d { x: x.0, w: w.0, dims }))
    }

    fn channel_vector_check(&self, x: Var, v: Var, op: &str) -> Result<[usize; 4]> {
        let dims = nchw(self.shape(x), op)?;
        if self.value(v).numel() != dims[1] {
            return Err(Error::shape(format!(
                "{op}: channel vector {:?} does not match {:?}",
                self.shape(v),
                self.shape(x)
            )));
        }
        Ok(dims)
    }

    /// Adds `b[c]` to every element of channel `c`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let [n, c, h, w] = self.channel_vector_check(x, b, "add_channel_bias")?;
        let p = h * w;
        let bias = self.data(b.0);
        let mut out = self.data(x.0).to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bias[(i / p) % c];
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(value, Op::ChannelBias { x: x.0, b: b.0 }))
    }

    /// Multiplies every element of channel `c` by `s[c]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let [n, c, h, w] = self.channel_vector_check(x, s, "mul_channel")?;
        let p = h * w;
        let scale = self.data(s.0);
        let mut out = self.data(x.0).to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v *= scale[(i / p) % c];
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(value, Op::ChannelScale { x: x.0, s: s.0 }))
    }

    /// Per-pixel channel mixing (a 1x1 convolution by a matrix).
    ///
    /// With `transposed == false`, `w` is `[out, in]`; otherwise `w` is
    /// `[in, out]` and is applied as its transpose.
    pub fn channel_mix(&mut self, x: Var, w: Var, transposed: bool) -> Result<Var> {
        let [n, ci, h, wd] = nchw(self.shape(x), "channel_mix input")?;
        let (rows, cols) = match self.shape(w) {
            [r, c] => (*r, *c),
            s => return Err(Error::shape(format!("channel_mix weight must be 2-d, got {s:?}"))),
        };
        let (co, expect_in) = if transposed { (cols, rows) } else { (rows, cols) };
        if expect_in != ci {
            return Err(Error::shape(format!(
                "channel_mix: weight {:?} (transposed={transposed}) vs input {:?}",
                self.shape(w),
                self.shape(x)
            )));
        }
        let p = h * wd;
        let x_flat = conv::to_channel_major(self.data(x.0), n, ci, p);
        let mut y = vec![T::zero(); co * n * p];
        let wm = Mat::new(self.data(w.0), rows, cols);
        let wm = if transposed { wm.t() } else { wm };
        gemm(wm, Mat::new(&x_flat, ci, n * p), &mut y, T::zero());
        let value = Tensor::new(&[n, co, h, wd], conv::from_channel_major(&y, n, co, p))?;
        Ok(self.push(
            value,
            Op::ChannelMix {
                x: x.0,
                w: w.0,
                transposed,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = map(self.value(x), |a| a.max(T::zero()));
        self.push(v, Op::Relu(x.0))
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Var {
        let alpha = T::from_f64_lossy(alpha);
        let v = map(self.value(x), |a| if a > T::zero() { a } else { a * alpha });
        self.push(v, Op::LeakyRelu(x.0, alpha))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = map(self.value(x), |a| a.tanh());
        self.push(v, Op::Tanh(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = map(self.value(x), sigmoid);
        self.push(v, Op::Sigmoid(x.0))
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let v = map(self.value(x), |a| a.max(T::zero()) + (-a.abs()).exp().ln_1p());
        self.push(v, Op::Softplus(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = map(self.value(x), |a| a.exp());
        self.push(v, Op::Exp(x.0))
    }

    /// `ln(max(x, floor))`; no gradient where clamped.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        let floor = T::from_f64_lossy(floor);
        let v = map(self.value(x), |a| a.max(floor).ln());
        self.push(v, Op::LogClamped(x.0, floor))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "add")?;
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "sub")?;
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "mul")?;
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let v = map(self.value(x), |a| a * c);
        self.push(v, Op::Scale(x.0, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let v = map(self.value(x), |a| a + c);
        self.push(v, Op::AddScalar(x.0))
    }

    /// `s * x` for a one-element `s` that may itself be trainable.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let s_val = self.scalar_operand(s, "mul_scalar")?;
        let v = map(self.value(x), |a| a * s_val);
        Ok(self.push(v, Op::MulScalarVar { x: x.0, s: s.0 }))
    }

    /// `sign(x) * max(|x| - theta, 0)` with a one-element `theta`.
    ///
    /// The subgradient at the kink is taken as zero.
    pub fn soft_threshold(&mut self, x: Var, theta: Var) -> Result<Var> {
        let t = self.scalar_operand(theta, "soft_threshold")?;
        if !(t > T::zero()) {
            return Err(Error::arg(format!(
                "soft_threshold needs theta > 0, got {:?}",
                t
            )));
        }
        let v = map(self.value(x), |a| shrink(a, t));
        Ok(self.push(
            v,
            Op::SoftThreshold {
                x: x.0,
                theta: theta.0,
            },
        ))
    }

    fn scalar_operand(&self, s: Var, op: &str) -> Result<T> {
        let t = self.value(s);
        if t.numel() != 1 {
            return Err(Error::shape(format!(
                "{op}: expected one-element operand, got {:?}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x.0)))
    }

    /// NCHW to NC11 by averaging each channel plane.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = nchw(self.shape(x), "global_avg_pool")?;
        let p = h * w;
        let inv = T::from_f64_lossy(1.0 / p as f64);
        let out = self
            .data(x.0)
            .chunks(p)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(&[n, c, 1, 1], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x.0)))
    }

    fn reduce(&mut self, x: Var, op: Op<T>, f: impl Fn(&[T]) -> T) -> Var {
        let v = Tensor::scalar(f(self.data(x.0)));
        self.push(v, op)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        self.reduce(x, Op::SumAll(x.0), |d| d.iter().copied().sum())
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        self.reduce(x, Op::MeanAll(x.0), |d| {
            d.iter().copied().sum::<T>() / T::from_usize(d.len()).expect("len fits")
        })
    }

    pub fn l1_norm(&mut self, x: Var) -> Var {
        self.reduce(x, Op::L1Norm(x.0), |d| d.iter().map(|v| v.abs()).sum())
    }

    pub fn l2_norm(&mut self, x: Var) -> Var {
        self.reduce(x, Op::L2Norm(x.0), |d| {
            d.iter().map(|&v| v * v).sum::<T>().sqrt()
        })
    }

    pub fn frobenius_sq(&mut self, x: Var) -> Var {
        self.reduce(x, Op::FrobeniusSq(x.0), |d| d.iter().map(|&v| v * v).sum())
    }

    /// Reverse sweep from a one-element `loss`. Consumes the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(dy) = grads[id].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(dy);
                continue;
            }
            for (input, g) in self.vjp(id, &dy) {
                if self.nodes[input].needs_grad {
                    accumulate(&mut grads[input], g);
                }
            }
        }
        // Only leaves keep their gradients.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) {
                *slot = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Vector-Jacobian products of node `id` w.r.t. each differentiable input.
    fn vjp(&self, id: usize, dy: &[T]) -> Vec<(usize, Vec<T>)> {
        let node = &self.nodes[id];
        let y = node.value.data();
        let needs = |i: usize| self.nodes[i].needs_grad;
        let unary = |x: usize, f: &dyn Fn(T, T, T) -> T| -> Vec<(usize, Vec<T>)> {
            let xd = self.data(x);
            let g = (0..dy.len()).map(|i| f(xd[i], y[i], dy[i])).collect();
            vec![(x, g)]
        };
        let zero = T::zero();
        match node.op {
            Op::Leaf | Op::Detach => vec![],
            Op::Conv2d { x, w, ref dims } => {
                let (dx, dw) = conv::conv2d_backward(
                    self.data(x),
                    self.data(w),
                    dy,
                    dims,
                    needs(x),
                    needs(w),
                );
                dx.map(|g| (x, g)).into_iter().chain(dw.map(|g| (w, g))).collect()
            }
            Op::ConvTranspose2d { x, w, ref dims } => {
                let (dx, dw) = conv::conv_transpose2d_backward(
                    self.data(x),
                    self.data(w),
                    dy,
                    dims,
                    needs(x),
                    needs(w),
                );
                dx.map(|g| (x, g)).into_iter().chain(dw.map(|g| (w, g))).collect()
            }
            Op::ChannelBias { x, b } => {
                let [_, c, h, w] = nchw(node.value.shape(), "").expect("nchw");
                let mut db = vec![zero; c];
                for (i, chunk) in dy.chunks(h * w).enumerate() {
                    db[i % c] += chunk.iter().copied().sum::<T>();
                }
                vec![(x, dy.to_vec()), (b, db)]
            }
            Op::ChannelScale { x, s } => {
                let [_, c, h, w] = nchw(node.value.shape(), "").expect("nchw");
                let p = h * w;
                let sd = self.data(s);
                let xd = self.data(x);
                let dx = dy.iter().enumerate().map(|(i, &g)| g * sd[(i / p) % c]).collect();
                let mut ds = vec![zero; c];
                for (i, &g) in dy.iter().enumerate() {
                    ds[(i / p) % c] += g * xd[i];
                }
                vec![(x, dx), (s, ds)]
            }
            Op::ChannelMix { x, w, transposed } => {
                let [n, ci, h, wd] = nchw(self.nodes[x].value.shape(), "").expect("nchw");
                let co = node.value.shape()[1];
                let p = h * wd;
                let dy_flat = conv::to_channel_major(dy, n, co, p);
                let wshape = self.nodes[w].value.shape();
                let wm = Mat::new(self.data(w), wshape[0], wshape[1]);
                let mut out = Vec::new();
                if needs(x) {
                    // dx = W_eff^T dy
                    let w_eff_t = if transposed { wm } else { wm.t() };
                    let mut dx = vec![zero; ci * n * p];
                    gemm(w_eff_t, Mat::new(&dy_flat, co, n * p), &mut dx, zero);
                    out.push((x, conv::from_channel_major(&dx, n, ci, p)));
                }
                if needs(w) {
                    let x_flat = conv::to_channel_major(self.data(x), n, ci, p);
                    let mut dw = vec![zero; ci * co];
                    if transposed {
                        gemm(
                            Mat::new(&x_flat, ci, n * p),
                            Mat::new(&dy_flat, co, n * p).t(),
                            &mut dw,
                            zero,
                        );
                    } else {
                        gemm(
                            Mat::new(&dy_flat, co, n * p),
                            Mat::new(&x_flat, ci, n * p).t(),
                            &mut dw,
                            zero,
                        );
                    }
                    out.push((w, dw));
                }
                out
            }
            Op::Relu(x) => unary(x, &|a, _, g| if a > zero { g } else { zero }),
            Op::LeakyRelu(x, alpha) => unary(x, &|a, _, g| if a > zero { g } else { g * alpha }),
            Op::Tanh(x) => unary(x, &|_, y, g| g * (T::one() - y * y)),
            Op::Sigmoid(x) => unary(x, &|_, y, g| g * y * (T::one() - y)),
            Op::Softplus(x) => unary(x, &|a, _, g| g * sigmoid(a)),
            Op::Exp(x) => unary(x, &|_, y, g| g * y),
            Op::LogClamped(x, floor) => unary(x, &|a, _, g| if a > floor { g / a } else { zero }),
            Op::Add(a, b) => vec![(a, dy.to_vec()), (b, dy.to_vec())],
            Op::Sub(a, b) => vec![(a, dy.to_vec()), (b, dy.iter().map(|&g| -g).collect())],
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                vec![
                    (a, dy.iter().zip(bd).map(|(&g, &v)| g * v).collect()),
                    (b, dy.iter().zip(ad).map(|(&g, &v)| g * v).collect()),
                ]
            }
            Op::Scale(x, c) => vec![(x, dy.iter().map(|&g| g * c).collect())],
            Op::AddScalar(x) | Op::Reshape(x) => vec![(x, dy.to_vec())],
            Op::MulScalarVar { x, s } => {
                let sv = self.data(s)[0];
                let ds = dy.iter().zip(self.data(x)).map(|(&g, &v)| g * v).sum();
                vec![(x, dy.iter().map(|&g| g * sv).collect()), (s, vec![ds])]
            }
            Op::SoftThreshold { x, theta } => {
                let t = self.data(theta)[0];
                let xd = self.data(x);
                let dx = dy
                    .iter()
                    .zip(xd)
                    .map(|(&g, &v)| if v.abs() > t { g } else { zero })
                    .collect();
                let dt = dy
                    .iter()
                    .zip(xd)
                    .map(|(&g, &v)| {
                        if v > t {
                            -g
                        } else if v < -t {
                            g
                        } else {
                            zero
                        }
                    })
                    .sum();
                vec![(x, dx), (theta, vec![dt])]
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = nchw(self.nodes[x].value.shape(), "").expect("nchw");
                let p = h * w;
                let inv = T::from_f64_lossy(1.0 / p as f64);
                let dx = dy.iter().flat_map(|&g| std::iter::repeat_n(g * inv, p)).collect();
                vec![(x, dx)]
            }
            Op::SumAll(x) => vec![(x, vec![dy[0]; self.nodes[x].value.numel()])],
            Op::MeanAll(x) => {
                let n = self.nodes[x].value.numel();
                let g = dy[0] / T::from_usize(n).expect("len fits");
                vec![(x, vec![g; n])]
            }
            Op::L1Norm(x) => {
                let g = dy[0];
                let dx = self
                    .data(x)
                    .iter()
                    .map(|&v| {
                        if v > zero {
                            g
                        } else if v < zero {
                            -g
                        } else {
                            zero
                        }
                    })
                    .collect();
                vec![(x, dx)]
            }
            Op::L2Norm(x) => {
                let norm = y[0];
                let dx = if norm > zero {
                    self.data(x).iter().map(|&v| dy[0] * v / norm).collect()
                } else {
                    vec![zero; self.nodes[x].value.numel()]
                };
                vec![(x, dx)]
            }
            Op::FrobeniusSq(x) => {
                let two = T::from_f64_lossy(2.0);
                vec![(x, self.data(x).iter().map(|&v| two * v * dy[0]).collect())]
            }
        }
    }
}

pub(crate) fn sigmoid<T: Element>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn shrink<T: Element>(a: T, t: T) -> T {
    if a > t {
        a - t
    } else if a < -t {
        a + t
    } else {
        T::zero()
    }
}
