//! Dense `f64` tensors and a reverse-mode gradient tape.
//!
//! Every primitive applied through a [`Tape`] appends one node holding the
//! computed value together with the operation that produced it. Calling
//! [`Tape::backward`] on a scalar node replays the adjoints in reverse record
//! order. Gradients of leaves accumulate across calls until
//! [`Tape::zero_grad`]; gradients of interior nodes hold the adjoint from the
//! latest backward pass.
//!
//! ```
//! use recast::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).data(), &[2.0, 4.0]);
//! ```

use crate::error::TensorError;

type TResult<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> TResult<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Rank-1 tensor owning `data`.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> TResult<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Mask(Var, Vec<f64>),
    Reshape(Var),
    Sum(Var),
    PickSum(Var, Vec<usize>),
    LogSoftmax(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        pad: usize,
        cols: Vec<f64>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Mask(..) => "dropout_mask",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::PickSum(..) => "pick_sum",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations. Confined to one thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

/// `c = beta * c + op(a) * op(b)` with `op(a)` of shape m x k and `op(b)` of
/// shape k x n. A transposed operand is stored as the row-major transpose.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the buffer lengths were checked above against the strides used.
    unsafe {
        matrixmultiply::dgemm(
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

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

struct ConvGeom {
    batch: usize,
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    pad: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn spatial(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let sp = self.spatial();
        for c in 0..self.in_c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * sp..(row + 1) * sp];
                    for oy in 0..self.oh {
                        let iy = (oy + ki) as isize - self.pad as isize;
                        for ox in 0..self.ow {
                            let ix = (ox + kj) as isize - self.pad as isize;
                            dst[oy * self.ow + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.h
                                && (ix as usize) < self.w
                            {
                                image[(c * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], image: &mut [f64]) {
        let sp = self.spatial();
        for c in 0..self.in_c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * sp..(row + 1) * sp];
                    for oy in 0..self.oh {
                        let iy = (oy + ki) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox + kj) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                image[(c * self.h + iy as usize) * self.w + ix as usize] +=
                                    src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded primitives in record order.
    pub fn ops(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: Vec::new(),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient held in the slot of `v`; zeros when `v` was not reached.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        if node.grad.is_empty() {
            Tensor::zeros(&node.value.shape)
        } else {
            Tensor {
                shape: node.value.shape.clone(),
                data: node.grad.clone(),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad.clear();
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> TResult<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> TResult<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> TResult<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), rg))
    }

    /// Adds a rank-1 `row` to every row of `x` (broadcast over the last axis).
    pub fn add_row(&mut self, x: Var, row: Var) -> TResult<Var> {
        let sx = self.value(x).shape();
        let sr = self.value(row).shape();
        if sr.len() != 1 || sx.last() != Some(&sr[0]) {
            return Err(shape_err(
                "add_row",
                format!("cannot broadcast {sr:?} over {sx:?}"),
            ));
        }
        let width = sr[0];
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks(width.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let shape = sx.to_vec();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(Tensor { shape, data }, Op::AddRow(x, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TResult<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|x| x * factor).collect(),
        };
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| x.max(0.0)).collect(),
        };
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// Elementwise product with a caller-supplied constant mask (dropout).
    pub fn mask(&mut self, a: Var, mask: &Tensor) -> TResult<Var> {
        if self.value(a).shape() != mask.shape() {
            return Err(shape_err(
                "dropout_mask",
                format!("mask {:?} vs input {:?}", mask.shape(), self.value(a).shape()),
            ));
        }
        let v = self.value(a);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().zip(&mask.data).map(|(x, m)| x * m).collect(),
        };
        let rg = self.rg(a);
        Ok(self.push(t, Op::Mask(a, mask.data.clone()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> TResult<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, a: Var) -> TResult<Var> {
        let s = self.value(a).shape();
        let batch = s.first().copied().unwrap_or(1);
        let rest = s.iter().skip(1).product();
        self.reshape(a, &[batch, rest])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    /// `sum_i x[i, labels[i]]` for a rank-2 `x`.
    pub fn pick_sum(&mut self, x: Var, labels: &[usize]) -> TResult<Var> {
        let s = self.value(x).shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err(
                "pick_sum",
                format!("{} labels for input {s:?}", labels.len()),
            ));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(shape_err(
                "pick_sum",
                format!("label {bad} outside {k} columns"),
            ));
        }
        let d = self.value(x).data();
        let total = labels.iter().enumerate().map(|(i, &l)| d[i * k + l]).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(total), Op::PickSum(x, labels.to_vec()), rg))
    }

    /// Row-wise log-softmax of a rank-2 tensor.
    pub fn log_softmax(&mut self, x: Var) -> TResult<Var> {
        let s = self.value(x).shape();
        if s.len() != 2 || s[1] == 0 {
            return Err(shape_err("log_softmax", format!("expected [rows, classes], got {s:?}")));
        }
        let k = s[1];
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = s.to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: out }, Op::LogSoftmax(x), rg))
    }

    /// Stride-1 2-D convolution of `[N, C, H, W]` input with `[O, C, kh, kw]`
    /// filters, per-channel bias and symmetric zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, pad: usize) -> TResult<Var> {
        let si = self.value(input).shape();
        let sw = self.value(weight).shape();
        let sb = self.value(bias).shape();
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] || sb != [sw[0]] {
            return Err(shape_err(
                "conv2d",
                format!("input {si:?}, weight {sw:?}, bias {sb:?}"),
            ));
        }
        if si[2] + 2 * pad < sw[2] || si[3] + 2 * pad < sw[3] {
            return Err(shape_err(
                "conv2d",
                format!("kernel {sw:?} larger than padded input {si:?}"),
            ));
        }
        let g = ConvGeom {
            batch: si[0],
            in_c: si[1],
            h: si[2],
            w: si[3],
            out_c: sw[0],
            kh: sw[2],
            kw: sw[3],
            oh: si[2] + 2 * pad - sw[2] + 1,
            ow: si[3] + 2 * pad - sw[3] + 1,
            pad,
        };
        let (patch, sp) = (g.patch(), g.spatial());
        let mut cols = vec![0.0; g.batch * patch * sp];
        let mut out = vec![0.0; g.batch * g.out_c * sp];
        let x = self.value(input).data();
        let wd = self.value(weight).data();
        let bd = self.value(bias).data();
        let image_len = g.in_c * g.h * g.w;
        for n in 0..g.batch {
            let c = &mut cols[n * patch * sp..(n + 1) * patch * sp];
            g.im2col(&x[n * image_len..(n + 1) * image_len], c);
            let o = &mut out[n * g.out_c * sp..(n + 1) * g.out_c * sp];
            for (ch, row) in o.chunks_mut(sp).enumerate() {
                row.fill(bd[ch]);
            }
            gemm(g.out_c, patch, sp, wd, false, c, false, o, 1.0);
        }
        let t = Tensor::new(vec![g.batch, g.out_c, g.oh, g.ow], out)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
                cols,
            },
            rg,
        ))
    }

    /// Non-overlapping max pooling over `size x size` windows; trailing rows
    /// and columns that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, input: Var, size: usize) -> TResult<Var> {
        let s = self.value(input).shape();
        if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
            return Err(shape_err(
                "max_pool2d",
                format!("window {size} over input {s:?}"),
            ));
        }
        let (nb, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / size, w / size);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(nb * c * oh * ow);
        let mut argmax = Vec::with_capacity(nb * c * oh * ow);
        for plane in 0..nb * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oy * size + dy) * w + ox * size + dx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(vec![nb, c, oh, ow], out)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::MaxPool2d { input, argmax }, rg))
    }

    /// Accumulates d(loss)/d(leaf) into every reachable leaf's gradient slot.
    pub fn backward(&mut self, loss: Var) -> TResult<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); loss.0 + 1];
        adj[loss.0] = vec![1.0];
        for i in (0..=loss.0).rev() {
            if adj[i].is_empty() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            self.propagate(i, &g, &mut adj);
            adj[i] = g;
        }
        for (node, a) in self.nodes.iter_mut().zip(adj) {
            if a.is_empty() {
                continue;
            }
            match node.op {
                Op::Leaf if !node.grad.is_empty() => add_into(&mut node.grad, &a),
                _ => node.grad = a,
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        let slot = |v: Var, adj: &mut [Vec<f64>]| -> Option<usize> {
            if !self.nodes[v.0].requires_grad {
                return None;
            }
            if adj[v.0].is_empty() {
                adj[v.0] = vec![0.0; self.nodes[v.0].value.len()];
            }
            Some(v.0)
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(ia) = slot(*a, adj) {
                    gemm(m, n, k, g, false, self.value(*b).data(), true, &mut adj[ia], 1.0);
                }
                if let Some(ib) = slot(*b, adj) {
                    gemm(k, m, n, self.value(*a).data(), true, g, false, &mut adj[ib], 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(idx) = slot(v, adj) {
                        add_into(&mut adj[idx], g);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if let Some(ix) = slot(*x, adj) {
                    add_into(&mut adj[ix], g);
                }
                if let Some(ir) = slot(*row, adj) {
                    let width = self.value(*row).len();
                    for chunk in g.chunks(width.max(1)) {
                        add_into(&mut adj[ir], chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ia) = slot(*a, adj) {
                    let bv = self.value(*b).data();
                    adj[ia].iter_mut().zip(g.iter().zip(bv)).for_each(|(d, (g, y))| *d += g * y);
                }
                if let Some(ib) = slot(*b, adj) {
                    let av = self.value(*a).data();
                    adj[ib].iter_mut().zip(g.iter().zip(av)).for_each(|(d, (g, x))| *d += g * x);
                }
            }
            Op::Scale(a, f) => {
                if let Some(ia) = slot(*a, adj) {
                    adj[ia].iter_mut().zip(g).for_each(|(d, g)| *d += f * g);
                }
            }
            Op::Relu(a) => {
                if let Some(ia) = slot(*a, adj) {
                    let out = node.value.data();
                    adj[ia]
                        .iter_mut()
                        .zip(g.iter().zip(out))
                        .for_each(|(d, (g, y))| {
                            if *y > 0.0 {
                                *d += g
                            }
                        });
                }
            }
            Op::Mask(a, mask) => {
                if let Some(ia) = slot(*a, adj) {
                    adj[ia].iter_mut().zip(g.iter().zip(mask)).for_each(|(d, (g, m))| *d += g * m);
                }
            }
            Op::Reshape(a) => {
                if let Some(ia) = slot(*a, adj) {
                    add_into(&mut adj[ia], g);
                }
            }
            Op::Sum(a) => {
                if let Some(ia) = slot(*a, adj) {
                    adj[ia].iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::PickSum(x, labels) => {
                if let Some(ix) = slot(*x, adj) {
                    let k = self.value(*x).shape()[1];
                    for (r, &l) in labels.iter().enumerate() {
                        adj[ix][r * k + l] += g[0];
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if let Some(ix) = slot(*x, adj) {
                    let k = node.value.shape()[1];
                    for ((d, gr), y) in adj[ix]
                        .chunks_mut(k)
                        .zip(g.chunks(k))
                        .zip(node.value.data().chunks(k))
                    {
                        let total: f64 = gr.iter().sum();
                        for j in 0..k {
                            d[j] += gr[j] - y[j].exp() * total;
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
                cols,
            } => {
                let si = self.value(*input).shape();
                let sw = self.value(*weight).shape();
                let geom = ConvGeom {
                    batch: si[0],
                    in_c: si[1],
                    h: si[2],
                    w: si[3],
                    out_c: sw[0],
                    kh: sw[2],
                    kw: sw[3],
                    oh: node.value.shape()[2],
                    ow: node.value.shape()[3],
                    pad: *pad,
                };
                let (patch, sp, oc) = (geom.patch(), geom.spatial(), geom.out_c);
                if let Some(iw) = slot(*weight, adj) {
                    for n in 0..geom.batch {
                        let gn = &g[n * oc * sp..(n + 1) * oc * sp];
                        let cn = &cols[n * patch * sp..(n + 1) * patch * sp];
                        gemm(oc, sp, patch, gn, false, cn, true, &mut adj[iw], 1.0);
                    }
                }
                if let Some(ib) = slot(*bias, adj) {
                    for n in 0..geom.batch {
                        for ch in 0..oc {
                            let start = (n * oc + ch) * sp;
                            adj[ib][ch] += g[start..start + sp].iter().sum::<f64>();
                        }
                    }
                }
                if let Some(ii) = slot(*input, adj) {
                    let wd = self.value(*weight).data();
                    let image_len = geom.in_c * geom.h * geom.w;
                    let mut dcols = vec![0.0; patch * sp];
                    for n in 0..geom.batch {
                        let gn = &g[n * oc * sp..(n + 1) * oc * sp];
                        gemm(patch, oc, sp, wd, true, gn, false, &mut dcols, 0.0);
                        geom.col2im_add(&dcols, &mut adj[ii][n * image_len..(n + 1) * image_len]);
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if let Some(ii) = slot(*input, adj) {
                    for (gv, &idx) in g.iter().zip(argmax) {
                        adj[ii][idx] += gv;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn log_softmax_of_equal_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let y = tape.log_softmax(x).unwrap();
        let ln2 = std::f64::consts::LN_2;
        approx(tape.value(y).data(), &[-ln2, -ln2], 1e-15);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = tape.constant(Tensor::new(vec![2, 2], vec![3.0, -1.0, 0.5, 7.0]).unwrap());
        let c = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, -1.0, 0.5, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_primitive() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(matches!(err, TensorError::Shape { op: "matmul", .. }));
        assert!(err.to_string().starts_with("matmul"));
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let loss = tape.sum(c);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let y = tape.relu(w);
        assert!(matches!(tape.backward(y), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn leaf_gradients_accumulate_until_zeroed() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![3.0]));
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).data(), &[2.0]);
        tape.zero_grad();
        assert_eq!(tape.grad(w).data(), &[0.0]);
    }

    #[test]
    fn tape_records_every_primitive() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap());
        let w = tape.leaf(Tensor::new(vec![1, 1, 3, 3], vec![0.1; 9]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![0.0]));
        let c = tape.conv2d(x, w, b, 1).unwrap();
        let p = tape.max_pool2d(c, 2).unwrap();
        let f = tape.flatten(p).unwrap();
        let l = tape.log_softmax(f).unwrap();
        let _ = tape.pick_sum(l, &[0]).unwrap();
        assert_eq!(
            tape.ops(),
            ["leaf", "leaf", "leaf", "conv2d", "max_pool2d", "reshape", "log_softmax", "pick_sum"]
        );
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut tape = Tape::new();
        let img: Vec<f64> = (0..2 * 5 * 5).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let ker: Vec<f64> = (0..3 * 2 * 3 * 3).map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let x = tape.constant(Tensor::new(vec![1, 2, 5, 5], img.clone()).unwrap());
        let w = tape.leaf(Tensor::new(vec![3, 2, 3, 3], ker.clone()).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![0.5, -0.5, 1.0]));
        let y = tape.conv2d(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 5, 5]);
        let bias = [0.5, -0.5, 1.0];
        for o in 0..3 {
            for oy in 0..5 {
                for ox in 0..5 {
                    let mut acc = bias[o];
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let (iy, ix) = (oy as isize + ki as isize - 1, ox as isize + kj as isize - 1);
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    acc += ker[((o * 2 + c) * 3 + ki) * 3 + kj]
                                        * img[(c * 5 + iy as usize) * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = tape.value(y).data()[(o * 5 + oy) * 5 + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap());
        let p = tape.max_pool2d(x, 2).unwrap();
        assert_eq!(tape.value(p).data(), &[4.0]);
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn pick_sum_rejects_bad_label() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(tape.pick_sum(x, &[3]).is_err());
    }
}
