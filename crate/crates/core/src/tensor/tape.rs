use super::conv::{conv3d_backward, conv3d_forward, ConvDims, ConvGeom};
use super::linalg::{gemm_nn, gemm_nt, gemm_tn};
use super::{shape_err, strides, Tensor, TensorError};

/// Sigmoid inputs are clamped to this magnitude. At 30 the output is still
/// strictly inside (0, 1) in f64 (at 40, `1/(1+e^-40)` rounds to exactly 1).
pub const SIGMOID_CLAMP: f64 = 30.0;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    Affine(Var, f64),
    MatMul(Var, Var),
    Reshape(Var),
    Pad(Var, Vec<(usize, usize)>),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    SumAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    LogSoftmax(Var),
    Standardize {
        x: Var,
        eps: f64,
    },
    Conv3d {
        input: Var,
        kernel: Var,
        dims: ConvDims,
        cols: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// so every operation's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Row mean and `1 / sqrt(var + eps)`.
fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    /// Smallest distance from any ReLU, sigmoid or clamp input on the tape to
    /// that op's breakpoint; `f64::INFINITY` if there are none. Only ops
    /// recorded for differentiation are visible. Finite-difference checks are
    /// only meaningful when this exceeds the probe step.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let (x, points): (Var, &[f64]) = match &node.op {
                Op::Relu(x) => (*x, &[0.0]),
                Op::Sigmoid(x) => (*x, &[-SIGMOID_CLAMP, SIGMOID_CLAMP]),
                Op::Clamp { x, lo, hi } => (*x, &[*lo, *hi][..]),
                _ => continue,
            };
            for v in self.nodes[x.0].value.data() {
                for p in points {
                    margin = margin.min((v - p).abs());
                }
            }
        }
        margin
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` root w.r.t. `v`, if `v` took part.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor {
                shape: self.nodes[v.0].value.shape.clone(),
                data: g.clone(),
            })
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect(),
        }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|p| f(*p)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.map(x, |v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        gemm_nn(&self.value(a).data, &self.value(b).data, &mut data, m, k, n);
        super::instrument::add_macs((m * k * n) as u64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            rg,
            Op::MatMul(a, b),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).clone().reshape(shape)?;
        if shape.contains(&0) {
            return Err(shape_err("reshape", format!("zero extent in {shape:?}")));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Reshape(x)))
    }

    /// Zero padding; `pads[i] = (before, after)` for axis `i`.
    pub fn pad(&mut self, x: Var, pads: &[(usize, usize)]) -> Result<Var, TensorError> {
        let src = self.value(x);
        if pads.len() != src.shape.len() {
            return Err(shape_err(
                "pad",
                format!("{} pad pairs for rank {}", pads.len(), src.shape.len()),
            ));
        }
        let out_shape: Vec<usize> = src
            .shape
            .iter()
            .zip(pads)
            .map(|(d, (b, a))| d + b + a)
            .collect();
        let mut out = Tensor::zeros(&out_shape);
        let in_strides = strides(&src.shape);
        let out_strides = strides(&out_shape);
        for (i, v) in src.data.iter().enumerate() {
            let mut rem = i;
            let mut o = 0;
            for ax in 0..in_strides.len() {
                let idx = rem / in_strides[ax];
                rem %= in_strides[ax];
                o += (idx + pads[ax].0) * out_strides[ax];
            }
            out.data[o] = *v;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Pad(x, pads.to_vec())))
    }

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<Var, TensorError> {
        let src = self.value(x);
        if axis >= src.shape.len() || start >= end || end > src.shape[axis] {
            return Err(shape_err(
                "slice",
                format!("axis {axis} range {start}..{end} of {:?}", src.shape),
            ));
        }
        let (outer, len, inner) = around(&src.shape, axis);
        let keep = end - start;
        let mut data = Vec::with_capacity(outer * keep * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            data.extend_from_slice(&src.data[base..base + keep * inner]);
        }
        let mut shape = src.shape.clone();
        shape[axis] = keep;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data }, rg, Op::Slice { x, axis, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`. A rank-1 input yields shape `[1]`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let src = self.value(x);
        if axis >= src.shape.len() {
            return Err(shape_err(
                "sum_axis",
                format!("axis {axis} of {:?}", src.shape),
            ));
        }
        let (outer, len, inner) = around(&src.shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src.data[base + i];
                }
            }
        }
        let mut shape = src.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data }, rg, Op::SumAxis { x, axis }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let n =
            self.shape(x).get(axis).copied().ok_or_else(|| {
                shape_err("mean_axis", format!("axis {axis} of {:?}", self.shape(x)))
            })?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Logistic function with inputs clamped to `±SIGMOID_CLAMP`.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| {
            let c = v.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
            1.0 / (1.0 + (-c).exp())
        });
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Relu(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.map(x, f64::ln);
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.map(x, f64::exp);
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Exp(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.map(x, |v| v.clamp(lo, hi));
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Clamp { x, lo, hi })
    }

    /// Adds a vector along `axis` of `x`, broadcasting over all other axes.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var, TensorError> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if axis >= xs.len() || bs.len() != 1 || bs[0] != xs[axis] {
            return Err(shape_err(
                "add_bias",
                format!("bias {bs:?} on axis {axis} of {xs:?}"),
            ));
        }
        let (outer, len, inner) = around(xs, axis);
        let mut out = self.value(x).clone();
        let b = &self.value(bias).data;
        for o in 0..outer {
            for (l, bv) in b.iter().enumerate().take(len) {
                let base = (o * len + l) * inner;
                for v in &mut out.data[base..base + inner] {
                    *v += bv;
                }
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, rg, Op::AddBias { x, bias, axis }))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let src = self.value(x);
        let n = *src
            .shape
            .last()
            .ok_or_else(|| shape_err("log_softmax", "rank 0"))?;
        let mut out = src.clone();
        for row in out.data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::LogSoftmax(x)))
    }

    /// Rescales each row along the last axis to zero mean and unit variance:
    /// `(x - mean) / sqrt(var + eps)`, with the biased variance.
    pub fn standardize(&mut self, x: Var, eps: f64) -> Result<Var, TensorError> {
        let src = self.value(x);
        let n = *src
            .shape
            .last()
            .ok_or_else(|| shape_err("standardize", "rank 0"))?;
        let mut out = src.clone();
        for row in out.data.chunks_mut(n) {
            let (mean, inv) = row_moments(row, eps);
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Standardize { x, eps }))
    }

    /// Cross-correlation of `input [B,C,T,H,W]` with `kernel [Co,C,t,kh,kw]`.
    pub fn conv3d(&mut self, input: Var, kernel: Var, geom: ConvGeom) -> Result<Var, TensorError> {
        let dims = ConvDims::resolve(self.shape(input), self.shape(kernel), geom)?;
        let rg = self.rg(&[input, kernel]);
        let keep_cols = self.requires_grad(kernel);
        let (data, cols) = conv3d_forward(
            &dims,
            &self.value(input).data,
            &self.value(kernel).data,
            keep_cols,
        );
        let out = Tensor {
            shape: dims.output_shape(),
            data,
        };
        Ok(self.push(
            out,
            rg,
            Op::Conv3d {
                input,
                kernel,
                dims,
                cols,
            },
        ))
    }

    /// Cross-correlation of `input [B,C,H,W]` with `kernel [Co,C,kh,kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let (is, ks) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if is.len() != 4 || ks.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("expected 4-d input and kernel, got {is:?} and {ks:?}"),
            ));
        }
        let x5 = self.reshape(input, &[is[0], is[1], 1, is[2], is[3]])?;
        let k5 = self.reshape(kernel, &[ks[0], ks[1], 1, ks[2], ks[3]])?;
        let y = self.conv3d(
            x5,
            k5,
            ConvGeom::new([1, stride, stride], [0, padding, padding]),
        )?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[1], ys[3], ys[4]])
    }

    /// Reverse-mode sweep from a single-element `root`. Gradients from any
    /// previous sweep are discarded.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        let root_shape = self.shape(root);
        if root_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(root_shape.to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        delta(slot);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Temporarily move the op out so node values stay borrowable.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, |s| axpy(s, g, 1.0));
                self.accumulate(*b, |s| axpy(s, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, |s| axpy(s, g, 1.0));
                self.accumulate(*b, |s| axpy(s, g, -1.0));
            }
            Op::Mul(a, b) => {
                let bv = self.nodes[b.0].value.data.clone();
                let av = self.nodes[a.0].value.data.clone();
                self.accumulate(*a, |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(&bv) {
                        *s += g * y;
                    }
                });
                self.accumulate(*b, |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(&av) {
                        *s += g * x;
                    }
                });
            }
            Op::Affine(x, scale) => self.accumulate(*x, |s| axpy(s, g, *scale)),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let bv = self.nodes[b.0].value.data.clone();
                    self.accumulate(*a, |s| gemm_nt(g, &bv, s, m, n, k));
                }
                if self.requires_grad(*b) {
                    let av = self.nodes[a.0].value.data.clone();
                    self.accumulate(*b, |s| gemm_tn(&av, g, s, k, m, n));
                }
            }
            Op::Reshape(x) => self.accumulate(*x, |s| axpy(s, g, 1.0)),
            Op::Pad(x, pads) => {
                let in_shape = self.shape(*x).to_vec();
                let out_shape = self.nodes[i].value.shape.clone();
                let in_strides = strides(&in_shape);
                let out_strides = strides(&out_shape);
                self.accumulate(*x, |s| {
                    for (j, sv) in s.iter_mut().enumerate() {
                        let mut rem = j;
                        let mut o = 0;
                        for ax in 0..in_strides.len() {
                            let idx = rem / in_strides[ax];
                            rem %= in_strides[ax];
                            o += (idx + pads[ax].0) * out_strides[ax];
                        }
                        *sv += g[o];
                    }
                });
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = around(self.shape(*x), *axis);
                let keep = self.nodes[i].value.shape[*axis];
                self.accumulate(*x, |s| {
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        let src = o * keep * inner;
                        axpy(
                            &mut s[dst..dst + keep * inner],
                            &g[src..src + keep * inner],
                            1.0,
                        );
                    }
                });
            }
            Op::SumAll(x) => {
                let gv = g[0];
                self.accumulate(*x, |s| s.iter_mut().for_each(|v| *v += gv));
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = around(self.shape(*x), *axis);
                self.accumulate(*x, |s| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            axpy(
                                &mut s[base..base + inner],
                                &g[o * inner..(o + 1) * inner],
                                1.0,
                            );
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let xin = self.nodes[x.0].value.data.clone();
                let y = self.nodes[i].value.data.clone();
                self.accumulate(*x, |s| {
                    for j in 0..s.len() {
                        if xin[j].abs() <= SIGMOID_CLAMP {
                            s[j] += g[j] * y[j] * (1.0 - y[j]);
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xin = self.nodes[x.0].value.data.clone();
                self.accumulate(*x, |s| {
                    for j in 0..s.len() {
                        if xin[j] > 0.0 {
                            s[j] += g[j];
                        }
                    }
                });
            }
            Op::Log(x) => {
                let xin = self.nodes[x.0].value.data.clone();
                self.accumulate(*x, |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] / xin[j];
                    }
                });
            }
            Op::Exp(x) => {
                let y = self.nodes[i].value.data.clone();
                self.accumulate(*x, |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * y[j];
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xin = self.nodes[x.0].value.data.clone();
                self.accumulate(*x, |s| {
                    for j in 0..s.len() {
                        if xin[j] >= *lo && xin[j] <= *hi {
                            s[j] += g[j];
                        }
                    }
                });
            }
            Op::AddBias { x, bias, axis } => {
                self.accumulate(*x, |s| axpy(s, g, 1.0));
                let (outer, len, inner) = around(self.shape(*x), *axis);
                self.accumulate(*bias, |s| {
                    for o in 0..outer {
                        for (l, sv) in s.iter_mut().enumerate().take(len) {
                            let base = (o * len + l) * inner;
                            *sv += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = self.nodes[i].value.data.clone();
                let n = *self.nodes[i].value.shape.last().unwrap();
                self.accumulate(*x, |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..n {
                            srow[j] += grow[j] - yrow[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::Standardize { x, eps } => {
                let y = self.nodes[i].value.data.clone();
                let n = *self.nodes[i].value.shape.last().unwrap();
                let eps = *eps;
                let xs = self.nodes[x.0].value.data.clone();
                self.accumulate(*x, |s| {
                    for (((srow, grow), yrow), xrow) in s
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(y.chunks(n))
                        .zip(xs.chunks(n))
                    {
                        let (_, inv) = row_moments(xrow, eps);
                        let gmean = grow.iter().sum::<f64>() / n as f64;
                        let gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            srow[j] += inv * (grow[j] - gmean - yrow[j] * gy);
                        }
                    }
                });
            }
            Op::Conv3d {
                input,
                kernel,
                dims,
                cols,
            } => {
                let kernel_data = self.nodes[kernel.0].value.data.clone();
                if self.requires_grad(*kernel) {
                    self.accumulate(*kernel, |s| {
                        conv3d_backward(dims, &kernel_data, cols, g, None, Some(s))
                    });
                }
                if self.requires_grad(*input) {
                    self.accumulate(*input, |s| {
                        conv3d_backward(dims, &kernel_data, cols, g, Some(s), None)
                    });
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}
