//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is an arena of nodes recorded in creation order. Every node
//! refers only to earlier nodes, so creation order is a topological order and
//! the backward pass is a single reverse sweep. The graph is re-recorded on
//! every forward pass; nothing is cached between steps.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sqrt(Var),
    Square(Var),
    Relu(Var),
    Sum(Var),
    MatMul(Var, Var),
    Conv2d(Var, Var),
    /// `x[N, C, ..] + b[C]`
    AddBias(Var, Var),
    /// `x[N, C, ..] + c[N, C]`
    ChannelAdd(Var, Var),
    /// `x[N, C, ..] * c[N, C]`
    ChannelMul(Var, Var),
    /// `x[N, C, ..] / c[N, C]`
    ChannelDiv(Var, Var),
    /// `[N, C, ..] -> [N, C]`
    SpatialMean(Var),
    /// `x[N, ..] * w[N]` with constant `w`
    RowScale(Var, Vec<f64>),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Focal {
        logits: Var,
        labels: Vec<usize>,
        gamma: f64,
        probs: Vec<f64>,
        log_pt: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic computation graph for one forward/backward cycle.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

/// Leading batch axis, channel axis and the product of trailing axes.
fn nc_inner(shape: &[usize]) -> Option<(usize, usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    Some((shape[0], shape[1], shape[2..].iter().product()))
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Record an input tensor. Only leaves with `requires_grad` receive
    /// gradients in [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A gradient-stopped copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient buffer matches value shape")
        })
    }

    /// Clear all gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    /// Smallest |input| over all ReLU nodes. Finite-difference checks use this
    /// to avoid configurations that straddle the kink.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(
                    self.value(x)
                        .data()
                        .iter()
                        .fold(f64::INFINITY, |m, v| m.min(v.abs())),
                ),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a, b]);
        self.push(out, op, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| f(*x)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|v| *v < 0.0) {
            return Err(Error::Numeric("sqrt of negative value".into()));
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, p);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, p], out)?, Op::MatMul(a, b), rg))
    }

    /// 3x3 cross-correlation, stride 1, zero padding 1.
    pub fn conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (sx, sk) = (self.value(x).shape(), self.value(k).shape());
        if sx.len() != 4 || sk.len() != 4 {
            return Err(Error::shape("conv2d", format!("{:?} * {:?}", sx, sk)));
        }
        if sk[2] != 3 || sk[3] != 3 {
            return Err(Error::shape("conv2d", "kernel must be 3x3"));
        }
        if sx[1] != sk[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {}", sx[1], sk[1]),
            ));
        }
        let geom = ConvGeom {
            n: sx[0],
            cin: sx[1],
            cout: sk[0],
            h: sx[2],
            w: sx[3],
        };
        let out = conv_forward(self.value(x).data(), self.value(k).data(), &geom);
        let rg = self.any_grad(&[x, k]);
        let shape = vec![geom.n, geom.cout, geom.h, geom.w];
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d(x, k), rg))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let (n, c, inner) =
            nc_inner(&sx).ok_or_else(|| Error::shape("add_bias", "input rank < 2"))?;
        if self.value(b).shape() != [c] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for {} channels", self.value(b).shape(), c),
            ));
        }
        let bv = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * inner;
                out[off..off + inner].iter_mut().for_each(|v| *v += bv[ch]);
            }
        }
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(Tensor::new(sx, out)?, Op::AddBias(x, b), rg))
    }

    fn check_channel_operand(&self, op: &'static str, x: Var, c: Var) -> Result<(usize, usize, usize)> {
        let sx = self.value(x).shape();
        let (n, ch, inner) = nc_inner(sx).ok_or_else(|| Error::shape(op, "input rank < 2"))?;
        if self.value(c).shape() != [n, ch] {
            return Err(Error::shape(
                op,
                format!("operand {:?} for input {:?}", self.value(c).shape(), sx),
            ));
        }
        Ok((n, ch, inner))
    }

    fn channel_map(&mut self, x: Var, c: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        let (n, ch, inner) = self.check_channel_operand(name, x, c)?;
        let cv = self.value(c).data();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len());
        for row in 0..n * ch {
            let s = cv[row];
            out.extend(xv[row * inner..(row + 1) * inner].iter().map(|v| f(*v, s)));
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.any_grad(&[x, c]);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    pub fn channel_add(&mut self, x: Var, c: Var) -> Result<Var> {
        self.channel_map(x, c, |v, s| v + s, Op::ChannelAdd(x, c), "channel_add")
    }

    pub fn channel_mul(&mut self, x: Var, c: Var) -> Result<Var> {
        self.channel_map(x, c, |v, s| v * s, Op::ChannelMul(x, c), "channel_mul")
    }

    pub fn channel_div(&mut self, x: Var, c: Var) -> Result<Var> {
        if self.value(c).data().iter().any(|v| *v == 0.0) {
            return Err(Error::Numeric("channel_div by zero".into()));
        }
        self.channel_map(x, c, |v, s| v / s, Op::ChannelDiv(x, c), "channel_div")
    }

    /// Mean over all trailing (spatial) axes: `[N, C, ..] -> [N, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let sx = self.value(x).shape();
        let (n, c, inner) =
            nc_inner(sx).ok_or_else(|| Error::shape("spatial_mean", "input rank < 2"))?;
        let xv = self.value(x).data();
        let out = (0..n * c)
            .map(|row| xv[row * inner..(row + 1) * inner].iter().sum::<f64>() / inner as f64)
            .collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::SpatialMean(x), rg))
    }

    /// Global average pooling; identical to [`Tape::spatial_mean`].
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.spatial_mean(x)
    }

    /// Multiply row `i` of the leading axis by the constant `factors[i]`.
    pub fn row_scale(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        if sx.is_empty() || sx[0] != factors.len() {
            return Err(Error::shape(
                "row_scale",
                format!("{} factors for shape {:?}", factors.len(), sx),
            ));
        }
        let inner = self.value(x).numel() / sx[0].max(1);
        let xv = self.value(x).data();
        let out = xv
            .iter()
            .enumerate()
            .map(|(i, v)| v * factors[i / inner])
            .collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(sx, out)?, Op::RowScale(x, factors), rg))
    }

    fn check_logits(&self, op: &'static str, logits: Var, labels: &[usize]) -> Result<(usize, usize)> {
        let s = self.value(logits).shape();
        if s.len() != 2 {
            return Err(Error::shape(op, format!("logits must be [N, K], got {:?}", s)));
        }
        let (n, k) = (s[0], s[1]);
        if n == 0 {
            return Err(Error::InvalidArgument(format!("{op}: empty batch")));
        }
        if labels.len() != n {
            return Err(Error::shape(op, format!("{} labels for {} rows", labels.len(), n)));
        }
        if let Some(bad) = labels.iter().find(|y| **y >= k) {
            return Err(Error::InvalidArgument(format!(
                "{op}: class index {bad} out of range for {k} classes"
            )));
        }
        Ok((n, k))
    }

    /// Mean softmax cross-entropy over the batch, via log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.check_logits("softmax_cross_entropy", logits, labels)?;
        let (probs, log_pt) = log_softmax_rows(self.value(logits).data(), n, k, labels);
        let loss = log_pt.iter().map(|lp| -lp).sum::<f64>() / n as f64;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean focal loss `-(1 - p_y)^gamma * log p_y`. With `gamma = 0` this is
    /// bit-identical to [`Tape::softmax_cross_entropy`].
    pub fn focal_loss(&mut self, logits: Var, labels: &[usize], gamma: f64) -> Result<Var> {
        if !(gamma >= 0.0) {
            return Err(Error::InvalidArgument(format!("focal gamma must be >= 0, got {gamma}")));
        }
        let (n, k) = self.check_logits("focal_loss", logits, labels)?;
        let (probs, log_pt) = log_softmax_rows(self.value(logits).data(), n, k, labels);
        let loss = log_pt
            .iter()
            .map(|lp| -(-lp.exp_m1()).powf(gamma) * lp)
            .sum::<f64>()
            / n as f64;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Focal {
                logits,
                labels: labels.to_vec(),
                gamma,
                probs,
                log_pt,
            },
            rg,
        ))
    }

    /// Populate gradients of `loss` with respect to every node that requires
    /// them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward called twice without reset_grads".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if needs(v) {
                        let ga = accumulate(grads, v, g.len());
                        ga.iter_mut().zip(g).for_each(|(d, s)| *d += sign * s);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    let ga = accumulate(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if needs(*b) {
                    let gb = accumulate(grads, *b, g.len());
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let other = val(*b);
                    let ga = accumulate(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * other[i];
                    }
                }
                if needs(*b) {
                    let other = val(*a);
                    let gb = accumulate(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * other[i];
                    }
                }
            }
            Op::Scale(a, f) => {
                let ga = accumulate(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s * f);
            }
            Op::AddScalar(a) => {
                let ga = accumulate(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            Op::Sqrt(a) => {
                let out = nodes[idx].value.data();
                let ga = accumulate(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * 0.5 / out[i];
                }
            }
            Op::Square(a) => {
                let x = val(*a);
                let ga = accumulate(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += 2.0 * g[i] * x[i];
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                let ga = accumulate(grads, *a, g.len());
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Sum(a) => {
                let n = nodes[a.0].value.numel();
                let ga = accumulate(grads, *a, n);
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, p) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    let bv = val(*b);
                    let ga = accumulate(grads, *a, m * k);
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = 0.0;
                            for j in 0..p {
                                s += g[i * p + j] * bv[kk * p + j];
                            }
                            ga[i * k + kk] += s;
                        }
                    }
                }
                if needs(*b) {
                    let av = val(*a);
                    let gb = accumulate(grads, *b, k * p);
                    for i in 0..m {
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            for j in 0..p {
                                gb[kk * p + j] += aik * g[i * p + j];
                            }
                        }
                    }
                }
            }
            Op::Conv2d(x, k) => {
                let (sx, sk) = (nodes[x.0].value.shape(), nodes[k.0].value.shape());
                let geom = ConvGeom {
                    n: sx[0],
                    cin: sx[1],
                    cout: sk[0],
                    h: sx[2],
                    w: sx[3],
                };
                if needs(*x) {
                    let dx = conv_backward_input(g, val(*k), &geom);
                    let gx = accumulate(grads, *x, dx.len());
                    gx.iter_mut().zip(&dx).for_each(|(d, s)| *d += s);
                }
                if needs(*k) {
                    let dk = conv_backward_kernel(g, val(*x), &geom);
                    let gk = accumulate(grads, *k, dk.len());
                    gk.iter_mut().zip(&dk).for_each(|(d, s)| *d += s);
                }
            }
            Op::AddBias(x, b) => {
                let (n, c, inner) = nc_inner(nodes[x.0].value.shape()).expect("checked");
                if needs(*x) {
                    let gx = accumulate(grads, *x, g.len());
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if needs(*b) {
                    let gb = accumulate(grads, *b, c);
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * inner;
                            gb[ch] += g[off..off + inner].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::ChannelAdd(x, c) => {
                let (n, ch, inner) = nc_inner(nodes[x.0].value.shape()).expect("checked");
                if needs(*x) {
                    let gx = accumulate(grads, *x, g.len());
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if needs(*c) {
                    let gc = accumulate(grads, *c, n * ch);
                    for row in 0..n * ch {
                        gc[row] += g[row * inner..(row + 1) * inner].iter().sum::<f64>();
                    }
                }
            }
            Op::ChannelMul(x, c) => {
                let (n, ch, inner) = nc_inner(nodes[x.0].value.shape()).expect("checked");
                let (xv, cv) = (val(*x), val(*c));
                if needs(*x) {
                    let gx = accumulate(grads, *x, g.len());
                    for row in 0..n * ch {
                        for i in row * inner..(row + 1) * inner {
                            gx[i] += g[i] * cv[row];
                        }
                    }
                }
                if needs(*c) {
                    let gc = accumulate(grads, *c, n * ch);
                    for row in 0..n * ch {
                        let mut s = 0.0;
                        for i in row * inner..(row + 1) * inner {
                            s += g[i] * xv[i];
                        }
                        gc[row] += s;
                    }
                }
            }
            Op::ChannelDiv(x, c) => {
                let (n, ch, inner) = nc_inner(nodes[x.0].value.shape()).expect("checked");
                let (out, cv) = (nodes[idx].value.data(), val(*c));
                if needs(*x) {
                    let gx = accumulate(grads, *x, g.len());
                    for row in 0..n * ch {
                        for i in row * inner..(row + 1) * inner {
                            gx[i] += g[i] / cv[row];
                        }
                    }
                }
                if needs(*c) {
                    let gc = accumulate(grads, *c, n * ch);
                    for row in 0..n * ch {
                        let mut s = 0.0;
                        for i in row * inner..(row + 1) * inner {
                            s += g[i] * out[i];
                        }
                        gc[row] -= s / cv[row];
                    }
                }
            }
            Op::SpatialMean(x) => {
                let (n, c, inner) = nc_inner(nodes[x.0].value.shape()).expect("checked");
                let gx = accumulate(grads, *x, n * c * inner);
                for row in 0..n * c {
                    let share = g[row] / inner as f64;
                    gx[row * inner..(row + 1) * inner]
                        .iter_mut()
                        .for_each(|d| *d += share);
                }
            }
            Op::RowScale(x, factors) => {
                let inner = g.len() / factors.len().max(1);
                let gx = accumulate(grads, *x, g.len());
                for (i, d) in gx.iter_mut().enumerate() {
                    *d += g[i] * factors[i / inner];
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                let gl = accumulate(grads, *logits, n * k);
                for i in 0..n {
                    for j in 0..k {
                        let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                        gl[i * k + j] += scale * (probs[i * k + j] - onehot);
                    }
                }
            }
            Op::Focal {
                logits,
                labels,
                gamma,
                probs,
                log_pt,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                let gl = accumulate(grads, *logits, n * k);
                for i in 0..n {
                    let a = log_pt[i];
                    let one_minus = -a.exp_m1();
                    // dL/d(log p_y)
                    let mut coef = -one_minus.powf(*gamma);
                    if *gamma > 0.0 && one_minus > 0.0 {
                        coef += gamma * one_minus.powf(gamma - 1.0) * a.exp() * a;
                    }
                    for j in 0..k {
                        let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                        gl[i * k + j] += scale * coef * (onehot - probs[i * k + j]);
                    }
                }
            }
        }
    }
}

/// Row-wise softmax probabilities and `log p_y` for the labelled class.
fn log_softmax_rows(logits: &[f64], n: usize, k: usize, labels: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut probs = vec![0.0; n * k];
    let mut log_pt = Vec::with_capacity(n);
    for i in 0..n {
        let row = &logits[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for j in 0..k {
            probs[i * k + j] = (row[j] - lse).exp();
        }
        log_pt.push(row[labels[i]] - lse);
    }
    (probs, log_pt)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * p..(kk + 1) * p];
            let orow = &mut out[i * p..(i + 1) * p];
            for j in 0..p {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

struct ConvGeom {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
}

/// Output index range `[lo, hi)` along one axis for kernel offset `d` in
/// {0,1,2}, such that `pos + d - 1` stays inside `[0, len)`.
#[inline]
fn valid_range(d: usize, len: usize) -> (usize, usize) {
    match d {
        0 => (1.min(len), len),
        1 => (0, len),
        _ => (0, len.saturating_sub(1)),
    }
}

fn conv_forward(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.h * g.w;
    let mut out = vec![0.0; g.n * g.cout * hw];
    par::for_each_chunk_mut(&mut out, g.cout * hw, |n, o| {
        let xin = &x[n * g.cin * hw..(n + 1) * g.cin * hw];
        for co in 0..g.cout {
            let oc = &mut o[co * hw..(co + 1) * hw];
            for ci in 0..g.cin {
                let xc = &xin[ci * hw..(ci + 1) * hw];
                for ky in 0..3 {
                    let (y0, y1) = valid_range(ky, g.h);
                    for kx in 0..3 {
                        let wgt = k[((co * g.cin + ci) * 3 + ky) * 3 + kx];
                        let (x0, x1) = valid_range(kx, g.w);
                        for yy in y0..y1 {
                            let src = (yy + ky - 1) * g.w + kx;
                            let dst = yy * g.w;
                            let orow = &mut oc[dst + x0..dst + x1];
                            let irow = &xc[src + x0 - 1..src + x1 - 1];
                            for (ov, iv) in orow.iter_mut().zip(irow) {
                                *ov += wgt * iv;
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv_backward_input(gout: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.h * g.w;
    let mut dx = vec![0.0; g.n * g.cin * hw];
    par::for_each_chunk_mut(&mut dx, g.cin * hw, |n, dxn| {
        let go = &gout[n * g.cout * hw..(n + 1) * g.cout * hw];
        for co in 0..g.cout {
            let gc = &go[co * hw..(co + 1) * hw];
            for ci in 0..g.cin {
                let dxc = &mut dxn[ci * hw..(ci + 1) * hw];
                for ky in 0..3 {
                    let (y0, y1) = valid_range(ky, g.h);
                    for kx in 0..3 {
                        let wgt = k[((co * g.cin + ci) * 3 + ky) * 3 + kx];
                        let (x0, x1) = valid_range(kx, g.w);
                        for yy in y0..y1 {
                            let src = (yy + ky - 1) * g.w + kx;
                            let dst = yy * g.w;
                            let drow = &mut dxc[src + x0 - 1..src + x1 - 1];
                            let grow = &gc[dst + x0..dst + x1];
                            for (dv, gv) in drow.iter_mut().zip(grow) {
                                *dv += wgt * gv;
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

fn conv_backward_kernel(gout: &[f64], x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.h * g.w;
    let ksize = g.cout * g.cin * 9;
    let partials = par::map_indices(g.n, |n| {
        let mut dk = vec![0.0; ksize];
        let go = &gout[n * g.cout * hw..(n + 1) * g.cout * hw];
        let xin = &x[n * g.cin * hw..(n + 1) * g.cin * hw];
        for co in 0..g.cout {
            let gc = &go[co * hw..(co + 1) * hw];
            for ci in 0..g.cin {
                let xc = &xin[ci * hw..(ci + 1) * hw];
                for ky in 0..3 {
                    let (y0, y1) = valid_range(ky, g.h);
                    for kx in 0..3 {
                        let (x0, x1) = valid_range(kx, g.w);
                        let mut s = 0.0;
                        for yy in y0..y1 {
                            let src = (yy + ky - 1) * g.w + kx;
                            let dst = yy * g.w;
                            let grow = &gc[dst + x0..dst + x1];
                            let irow = &xc[src + x0 - 1..src + x1 - 1];
                            for (gv, iv) in grow.iter().zip(irow) {
                                s += gv * iv;
                            }
                        }
                        dk[((co * g.cin + ci) * 3 + ky) * 3 + kx] += s;
                    }
                }
            }
        }
        dk
    });
    let mut dk = vec![0.0; ksize];
    for p in &partials {
        dk.iter_mut().zip(p).for_each(|(d, s)| *d += s);
    }
    dk
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let out = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0, 5.0, 6.0]);

        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let dot = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(dot).data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..25).map(|v| v as f64 * 0.3 - 2.0).collect();
        let x = tape.constant(t(&[1, 1, 5, 5], &data));
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let k = tape.constant(t(&[1, 1, 3, 3], &kd));
        let y = tape.conv2d(x, k).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);

        let z = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let y0 = tape.conv2d(x, z).unwrap();
        assert!(tape.value(y0).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[3, 1, 3, 3]));
        assert!(matches!(tape.conv2d(x, k), Err(Error::Shape { .. })));
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[-1.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln2() {
        let mut tape = Tape::new();
        let l = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let loss = tape.softmax_cross_entropy(l, &[0]).unwrap();
        assert!((tape.value(loss).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_errors() {
        let mut tape = Tape::new();
        let l = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        assert!(matches!(
            tape.softmax_cross_entropy(l, &[2]),
            Err(Error::InvalidArgument(_))
        ));
        let empty = tape.constant(Tensor::zeros(&[0, 2]));
        assert!(tape.softmax_cross_entropy(empty, &[]).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[2, 3, 2], 0.7));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|g| *g == 1.0));
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.square(x);
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[1.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Autodiff(_))));
        tape.reset_grads();
        tape.backward(s).unwrap();
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Autodiff(_))));
    }

    #[test]
    fn shared_input_accumulates_both_paths() {
        // y = x*x + 3x via a shared leaf versus two separate copies.
        let mut shared = Tape::new();
        let x = shared.param(t(&[2], &[0.5, -1.5]));
        let xx = shared.mul(x, x).unwrap();
        let x3 = shared.scale(x, 3.0);
        let y = shared.add(xx, x3).unwrap();
        let s = shared.sum(y);
        shared.backward(s).unwrap();

        let mut dup = Tape::new();
        let a = dup.param(t(&[2], &[0.5, -1.5]));
        let b = dup.param(t(&[2], &[0.5, -1.5]));
        let c = dup.param(t(&[2], &[0.5, -1.5]));
        let ab = dup.mul(a, b).unwrap();
        let c3 = dup.scale(c, 3.0);
        let y2 = dup.add(ab, c3).unwrap();
        let s2 = dup.sum(y2);
        dup.backward(s2).unwrap();
        let total: Vec<f64> = (0..2)
            .map(|i| {
                dup.grad(a).unwrap().data()[i]
                    + dup.grad(b).unwrap().data()[i]
                    + dup.grad(c).unwrap().data()[i]
            })
            .collect();
        assert_eq!(shared.grad(x).unwrap().data(), &total[..]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn focal_with_zero_gamma_equals_cross_entropy() {
        let mut tape = Tape::new();
        let l = tape.param(t(&[2, 3], &[0.3, -1.2, 2.0, 0.0, 0.4, -0.9]));
        let ce = tape.softmax_cross_entropy(l, &[2, 0]).unwrap();
        let fl = tape.focal_loss(l, &[2, 0], 0.0).unwrap();
        assert_eq!(
            tape.value(ce).item().unwrap().to_bits(),
            tape.value(fl).item().unwrap().to_bits()
        );
    }

    #[test]
    fn focal_below_cross_entropy_for_confident_predictions() {
        let mut tape = Tape::new();
        let l = tape.constant(t(&[1, 2], &[2.0, 0.0]));
        let ce = tape.softmax_cross_entropy(l, &[0]).unwrap();
        let fl = tape.focal_loss(l, &[0], 2.0).unwrap();
        assert!(tape.value(fl).item().unwrap() < tape.value(ce).item().unwrap());
        assert!(tape.focal_loss(l, &[0], -1.0).is_err());
    }
}
