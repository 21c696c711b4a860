use super::kernels::{self, ConvDims};
use super::{check_finite, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Matmul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    ChannelScale(Var, Var),
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Relu(Var),
    Log(Var),
    Exp(Var),
    Abs(Var),
    Softplus(Var),
    Powf(Var, f64),
    SmoothL1(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    Gather { x: Var, index: Vec<usize> },
    Reshape(Var),
    NchwToRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Wengert list for one forward pass.
///
/// Values are appended in evaluation order; [`Tape::backward`] walks the list
/// once in reverse and only propagates into nodes that depend on a leaf.
/// Constants never receive gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every leaf of a consumed tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    /// Gradient for `leaf`, or `None` if it was not a leaf or did not
    /// influence the root.
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.grads.get(leaf.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `leaf`, zero-filled when the leaf did not influence the root.
    pub fn get_or_zeros(&self, leaf: Var, shape: &[usize]) -> Tensor {
        self.get(leaf).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Number of recorded ops whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn add_into(dst: &mut Option<Vec<f64>>, src: impl Iterator<Item = f64>, len: usize) {
    let d = dst.get_or_insert_with(|| vec![0.0; len]);
    for (a, b) in d.iter_mut().zip(src) {
        *a += b;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Constant, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(name, out, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(name, out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `c * a`.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    /// `a + c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("offset", a, |x| x + c, Op::Offset(a))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::Matmul(a, b), &[a, b])
    }

    /// Affine map on rows: `x [m,in]`, `w [out,in]`, `b [out]` -> `x w^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.ndim() != 2 || tw.ndim() != 2 || tx.shape()[1] != tw.shape()[1] || tb.shape() != [tw.shape()[0]] {
            return Err(Error::shape("linear", format!("x {:?}, w {:?}, b {:?}", tx.shape(), tw.shape(), tb.shape())));
        }
        let (m, i, o) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
        let wt = kernels::transpose(tw.data(), o, i);
        let mut out = kernels::matmul(tx.data(), &wt, m, i, o);
        for row in out.chunks_mut(o) {
            for (v, &bv) in row.iter_mut().zip(tb.data()) {
                *v += bv;
            }
        }
        self.push("linear", Tensor::from_parts(vec![m, o], out), Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Stride-1 2-D convolution with symmetric zero padding.
    /// `x [N,C,H,W]`, `w [O,C,KH,KW]`, `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let d = conv_dims(tx, tw, tb, pad)?;
        let out = kernels::conv2d_forward(tx.data(), tw.data(), Some(tb.data()), &d);
        let shape = vec![d.n, d.o, d.out_h(), d.out_w()];
        self.push("conv2d", Tensor::from_parts(shape, out), Op::Conv2d { x, w, b, pad }, &[x, w, b])
    }

    /// Multiplies each leading-axis slice of `w` by the matching entry of
    /// `omega`. A single-element `omega` scales the whole tensor.
    pub fn channel_scale(&mut self, w: Var, omega: Var) -> Result<Var> {
        let (tw, to) = (self.value(w), self.value(omega));
        let lead = tw.shape().first().copied().unwrap_or(1);
        if to.ndim() != 1 || (to.numel() != lead && to.numel() != 1) {
            return Err(Error::shape(
                "channel_scale",
                format!("weight {:?} with coefficients {:?}", tw.shape(), to.shape()),
            ));
        }
        let per = if to.numel() == 1 { tw.numel() } else { tw.numel() / lead };
        let data =
            tw.data().chunks(per).zip(to.data()).flat_map(|(chunk, &s)| chunk.iter().map(move |&v| v * s)).collect();
        let out = Tensor::from_parts(tw.shape().to_vec(), data);
        self.push("channel_scale", out, Op::ChannelScale(w, omega), &[w, omega])
    }

    /// 2x2 stride-2 max pooling over `[N,C,H,W]` with even `H`, `W`.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::shape("max_pool2", format!("{s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (out, argmax) = kernels::max_pool2(tx.data(), n * c, h, w);
        let t = Tensor::from_parts(vec![n, c, h / 2, w / 2], out);
        self.push("max_pool2", t, Op::MaxPool2 { x, argmax }, &[x])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    /// `a^p` for nonnegative `a`.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("powf", "base must be nonnegative"));
        }
        self.unary("powf", a, |x| x.powf(p), Op::Powf(a, p))
    }

    /// Elementwise Huber with unit threshold: `0.5 d^2` if `|d| < 1`, else `|d| - 0.5`.
    pub fn smooth_l1(&mut self, a: Var) -> Result<Var> {
        self.unary("smooth_l1", a, smooth_l1, Op::SmoothL1(a))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.ndim() {
            return Err(Error::shape("softmax", format!("axis {axis} of {:?}", tx.shape())));
        }
        let out = kernels::softmax_axis(tx.data(), tx.shape(), axis);
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push("softmax", t, Op::Softmax { x, axis }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.ndim() {
            return Err(Error::shape("log_softmax", format!("axis {axis} of {:?}", tx.shape())));
        }
        let out = kernels::log_softmax_axis(tx.data(), tx.shape(), axis);
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push("log_softmax", t, Op::LogSoftmax { x, axis }, &[x])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Picks flat elements of `x` into a 1-D tensor.
    pub fn gather(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        if index.is_empty() {
            return Err(Error::shape("gather", "empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= tx.numel()) {
            return Err(Error::shape("gather", format!("index {bad} out of {}", tx.numel())));
        }
        let data = index.iter().map(|&i| tx.data()[i]).collect();
        let t = Tensor::from_parts(vec![index.len()], data);
        self.push("gather", t, Op::Gather { x, index }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// `[N,C,H,W] -> [N*H*W, C]`, rows ordered by `(n, h, w)`.
    pub fn nchw_to_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 4 {
            return Err(Error::shape("nchw_to_rows", format!("{s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![0.0; tx.numel()];
        let src = tx.data();
        for ni in 0..n {
            for ci in 0..c {
                for p in 0..h * w {
                    out[(ni * h * w + p) * c + ci] = src[(ni * c + ci) * h * w + p];
                }
            }
        }
        let t = Tensor::from_parts(vec![n * h * w, c], out);
        self.push("nchw_to_rows", t, Op::NchwToRows(x), &[x])
    }

    /// Reverse sweep from a scalar `root`. Consumes the tape.
    pub fn backward(self, root: Var) -> Result<Gradients> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.nodes[root.0].value.shape()),
            ));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        let mut visited = 0;

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            let rg = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| nodes[v.0].value.data();
            let len = |v: Var| nodes[v.0].value.numel();
            match &node.op {
                Op::Leaf | Op::Constant => unreachable!(),
                Op::Add(a, b) => {
                    if rg(*a) {
                        add_into(&mut grads[a.0], g.iter().copied(), len(*a));
                    }
                    if rg(*b) {
                        add_into(&mut grads[b.0], g.iter().copied(), len(*b));
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*a) {
                        add_into(&mut grads[a.0], g.iter().copied(), len(*a));
                    }
                    if rg(*b) {
                        add_into(&mut grads[b.0], g.iter().map(|v| -v), len(*b));
                    }
                }
                Op::Mul(a, b) => {
                    if rg(*a) {
                        let it = g.iter().zip(val(*b)).map(|(g, y)| g * y);
                        add_into(&mut grads[a.0], it, len(*a));
                    }
                    if rg(*b) {
                        let it = g.iter().zip(val(*a)).map(|(g, x)| g * x);
                        add_into(&mut grads[b.0], it, len(*b));
                    }
                }
                Op::Div(a, b) => {
                    if rg(*a) {
                        let it = g.iter().zip(val(*b)).map(|(g, y)| g / y);
                        add_into(&mut grads[a.0], it, len(*a));
                    }
                    if rg(*b) {
                        let it = g.iter().zip(val(*a).iter().zip(val(*b))).map(|(g, (x, y))| -g * x / (y * y));
                        add_into(&mut grads[b.0], it, len(*b));
                    }
                }
                Op::Scale(a, c) => {
                    add_into(&mut grads[a.0], g.iter().map(|v| c * v), len(*a));
                }
                Op::Offset(a) | Op::Reshape(a) => {
                    add_into(&mut grads[a.0], g.iter().copied(), len(*a));
                }
                Op::Matmul(a, b) => {
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if rg(*a) {
                        let bt = kernels::transpose(val(*b), k, n);
                        let ga = kernels::matmul(&g, &bt, m, n, k);
                        add_into(&mut grads[a.0], ga.into_iter(), m * k);
                    }
                    if rg(*b) {
                        let at = kernels::transpose(val(*a), m, k);
                        let gb = kernels::matmul(&at, &g, k, m, n);
                        add_into(&mut grads[b.0], gb.into_iter(), k * n);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (m, i) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                    let o = nodes[w.0].value.shape()[0];
                    if rg(*x) {
                        let gx = kernels::matmul(&g, val(*w), m, o, i);
                        add_into(&mut grads[x.0], gx.into_iter(), m * i);
                    }
                    if rg(*w) {
                        let gt = kernels::transpose(&g, m, o);
                        let gw = kernels::matmul(&gt, val(*x), o, m, i);
                        add_into(&mut grads[w.0], gw.into_iter(), o * i);
                    }
                    if rg(*b) {
                        let mut gb = vec![0.0; o];
                        for row in g.chunks(o) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        add_into(&mut grads[b.0], gb.into_iter(), o);
                    }
                }
                Op::Conv2d { x, w, b, pad } => {
                    let d = conv_dims(&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value, *pad)?;
                    let (gx, gw, gb) = kernels::conv2d_backward(val(*x), val(*w), &g, &d, rg(*x), rg(*w));
                    if let Some(gx) = gx {
                        add_into(&mut grads[x.0], gx.into_iter(), len(*x));
                    }
                    if let Some(gw) = gw {
                        add_into(&mut grads[w.0], gw.into_iter(), len(*w));
                    }
                    if rg(*b) {
                        add_into(&mut grads[b.0], gb.into_iter(), len(*b));
                    }
                }
                Op::ChannelScale(w, omega) => {
                    let om = val(*omega);
                    let per = if om.len() == 1 { len(*w) } else { len(*w) / om.len() };
                    if rg(*w) {
                        let it = g.chunks(per).zip(om).flat_map(|(c, &s)| c.iter().map(move |v| v * s));
                        add_into(&mut grads[w.0], it, len(*w));
                    }
                    if rg(*omega) {
                        let it = g
                            .chunks(per)
                            .zip(val(*w).chunks(per))
                            .map(|(gc, wc)| gc.iter().zip(wc).map(|(a, b)| a * b).sum::<f64>());
                        add_into(&mut grads[omega.0], it, om.len());
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let gx = grads[x.0].get_or_insert_with(|| vec![0.0; len(*x)]);
                    for (gv, &src) in g.iter().zip(argmax) {
                        gx[src] += gv;
                    }
                }
                Op::Relu(a) => {
                    let it = g.iter().zip(node.value.data()).map(|(g, y)| if *y > 0.0 { *g } else { 0.0 });
                    add_into(&mut grads[a.0], it, len(*a));
                }
                Op::Log(a) => {
                    let it = g.iter().zip(val(*a)).map(|(g, x)| g / x);
                    add_into(&mut grads[a.0], it, len(*a));
                }
                Op::Exp(a) => {
                    let it = g.iter().zip(node.value.data()).map(|(g, y)| g * y);
                    add_into(&mut grads[a.0], it, len(*a));
                }
                Op::Abs(a) => {
                    let it = g.iter().zip(val(*a)).map(|(g, x)| {
                        if *x > 0.0 {
                            *g
                        } else if *x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    });
                    add_into(&mut grads[a.0], it, len(*a));
                }
                Op::Softplus(a) => {
                    let it = g.iter().zip(val(*a)).map(|(g, x)| g * sigmoid(*x));
                    add_into(&mut grads[a.0], it, len(*a));
                }
                Op::Powf(a, p) => {
                    let p = *p;
                    let it = g.iter().zip(val(*a)).map(|(g, x)| {
                        if p == 0.0 || (*x == 0.0 && p > 1.0) {
                            0.0
                        } else {
                            g * p * x.powf(p - 1.0)
                        }
                    });
                    add_into(&mut grads[a.0], it, len(*a));
                }
                Op::SmoothL1(a) => {
                    let it = g.iter().zip(val(*a)).map(|(g, d)| if d.abs() < 1.0 { g * d } else { g * d.signum() });
                    add_into(&mut grads[a.0], it, len(*a));
                }
                Op::Softmax { x, axis } => {
                    let y = node.value.data();
                    let (outer, n, inner) = kernels::split_axis(node.value.shape(), *axis);
                    let mut gx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let dot: f64 = (0..n).map(|a| g[base + a * inner] * y[base + a * inner]).sum();
                            for a in 0..n {
                                let k = base + a * inner;
                                gx[k] = y[k] * (g[k] - dot);
                            }
                        }
                    }
                    add_into(&mut grads[x.0], gx.into_iter(), len(*x));
                }
                Op::LogSoftmax { x, axis } => {
                    let y = node.value.data();
                    let (outer, n, inner) = kernels::split_axis(node.value.shape(), *axis);
                    let mut gx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let gsum: f64 = (0..n).map(|a| g[base + a * inner]).sum();
                            for a in 0..n {
                                let k = base + a * inner;
                                gx[k] = g[k] - y[k].exp() * gsum;
                            }
                        }
                    }
                    add_into(&mut grads[x.0], gx.into_iter(), len(*x));
                }
                Op::Sum(a) => {
                    let n = len(*a);
                    add_into(&mut grads[a.0], std::iter::repeat_n(g[0], n), n);
                }
                Op::Mean(a) => {
                    let n = len(*a);
                    add_into(&mut grads[a.0], std::iter::repeat_n(g[0] / n as f64, n), n);
                }
                Op::Gather { x, index } => {
                    let gx = grads[x.0].get_or_insert_with(|| vec![0.0; len(*x)]);
                    for (gv, &src) in g.iter().zip(index) {
                        gx[src] += gv;
                    }
                }
                Op::NchwToRows(x) => {
                    let s = nodes[x.0].value.shape();
                    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let gx = grads[x.0].get_or_insert_with(|| vec![0.0; n * c * hw]);
                    for ni in 0..n {
                        for ci in 0..c {
                            for p in 0..hw {
                                gx[(ni * c + ci) * hw + p] += g[(ni * hw + p) * c + ci];
                            }
                        }
                    }
                }
            }
        }

        let mut out = Vec::with_capacity(nodes.len());
        for (node, g) in nodes.iter().zip(grads) {
            let t = match (&node.op, g) {
                (Op::Leaf, Some(g)) => {
                    check_finite("backward", &g)?;
                    Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                }
                _ => None,
            };
            out.push(t);
        }
        Ok(Gradients { grads: out, visited })
    }
}

fn conv_dims(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Result<ConvDims> {
    let (sx, sw) = (x.shape(), w.shape());
    if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || b.shape() != [sw[0]] {
        return Err(Error::shape("conv2d", format!("input {sx:?}, weight {sw:?}, bias {:?}", b.shape())));
    }
    if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
        return Err(Error::shape("conv2d", "kernel larger than padded input"));
    }
    Ok(ConvDims { n: sx[0], c: sx[1], h: sx[2], w: sx[3], o: sw[0], kh: sw[2], kw: sw[3], pad })
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn channel_scale_example() {
        let mut tape = Tape::new();
        let w = tape.constant(t(&[1], &[2.0]));
        let om = tape.constant(t(&[1], &[0.5]));
        let y = tape.channel_scale(w, om).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0]);
    }

    #[test]
    fn product_rule_through_scale() {
        // L = sum((w * omega) * x) with w=2, x=3, omega=0.5
        let mut tape = Tape::new();
        let w = tape.constant(t(&[1], &[2.0]));
        let om = tape.leaf(t(&[1], &[0.5]));
        let x = tape.constant(t(&[1], &[3.0]));
        let sw = tape.channel_scale(w, om).unwrap();
        let y = tape.mul(sw, x).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(om).unwrap().data(), &[6.0]);
        assert!(g.get(w).is_none());
    }

    #[test]
    fn mean_gradient() {
        let mut tape = Tape::new();
        let v = tape.leaf(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
        let l = tape.mean(v).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let v = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = tape.relu(v).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Shape { .. })));
    }

    #[test]
    fn shape_mismatch_is_descriptive() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn log_of_zero_is_rejected_as_non_finite() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1], &[0.0]));
        assert!(matches!(tape.log(a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn each_op_visited_once() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let b = tape.exp(a).unwrap();
        let c = tape.mul(b, a).unwrap();
        let d = tape.add(c, b).unwrap();
        let l = tape.sum(d).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.visited(), 4);
        // d/da (a e^a + e^a) = e^a (a + 2)
        for (i, &x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            let want = x.exp() * (x + 2.0);
            assert!((g.get(a).unwrap().data()[i] - want).abs() < 1e-12);
        }
    }
}
