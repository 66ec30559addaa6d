use std::collections::HashMap;

use super::{mismatch, GradError, ParamId, ParamStore, Tensor};

/// Index of a node in its [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeRef(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Relu(usize),
    Log(usize),
    Exp(usize),
    Sqrt(usize),
    Square(usize),
    Softplus(usize),
    SumAll(usize),
    SumLast(usize),
    LogSumExpLast(usize),
    SoftmaxLast(usize),
    LogSoftmaxLast(usize),
    Reshape(usize),
    SliceLast { x: usize, start: usize },
    ConcatLast(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        /// im2col buffers per batch item, kept when the weights need gradients.
        cols: Vec<f64>,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only tape of tensor operations. Node inputs always precede the node,
/// so the graph is acyclic by construction.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
    frozen_params: bool,
}

/// Gradients of a scalar with respect to parameters and variable leaves.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    /// Gradient for a parameter; `None` if it never entered the graph.
    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        let node = *self.params.get(&id)?;
        self.node(node)
    }

    /// Gradient for a parameter, zeros when it did not influence the loss.
    pub fn param_or_zeros(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.param(id).unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    pub fn wrt(&self, node: NodeRef) -> Option<Tensor> {
        self.node(node.0)
    }

    fn node(&self, i: usize) -> Option<Tensor> {
        let shape = self.shapes.get(i)?.clone();
        let data = match self.leaves.get(i)? {
            Some(g) => g.clone(),
            None => vec![0.0; shape.iter().product()],
        };
        Some(Tensor { shape, data })
    }
}

enum Gemm {
    N,
    T,
}

/// `c (m x n) [+]= a (m x k) * b (k x n)` on row-major buffers; `Gemm::T`
/// reads the operand as the transpose of its stored row-major matrix.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: Gemm, b: &[f64], tb: Gemm, c: &mut [f64], accumulate: bool) {
    let (rsa, csa) = match ta {
        Gemm::N => (k as isize, 1),
        Gemm::T => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Gemm::N => (n as isize, 1),
        Gemm::T => (1, k as isize),
    };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds asserted above; strides describe dense row-major storage.
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

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(d: &ConvDims, x: &[f64], cols: &mut [f64]) {
    let p = d.positions();
    for ci in 0..d.c {
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (ci * d.k + ki) * d.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let src = &x[(ci * d.h + oy * d.stride + ki) * d.w..];
                    for ox in 0..d.ow {
                        dst[oy * d.ow + ox] = src[ox * d.stride + kj];
                    }
                }
            }
        }
    }
}

fn col2im(d: &ConvDims, cols: &[f64], dx: &mut [f64]) {
    let p = d.positions();
    for ci in 0..d.c {
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (ci * d.k + ki) * d.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let base = (ci * d.h + oy * d.stride + ki) * d.w;
                    for ox in 0..d.ow {
                        dx[base + ox * d.stride + kj] += src[oy * d.ow + ox];
                    }
                }
            }
        }
    }
}

fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (oi, xi) in o.iter_mut().zip(row) {
            *oi = (xi - max).exp();
            total += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= total;
        }
    }
    out
}

fn logsumexp_rows(x: &[f64], k: usize) -> Vec<f64> {
    x.chunks_exact(k)
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return max;
            }
            max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
        })
        .collect()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, contrib: Vec<f64>) {
    match &mut grads[idx] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), GradError> {
    if a.shape != b.shape {
        return Err(mismatch(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

impl Graph {
    /// A graph whose parameters are trainable.
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that treats parameters as constants and keeps no backward buffers.
    pub fn inference() -> Self {
        Self {
            frozen_params: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, node: NodeRef) -> &Tensor {
        &self.nodes[node.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeRef {
        self.nodes.push(Node { value, op, needs_grad });
        NodeRef(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn val(&self, n: NodeRef) -> &Tensor {
        &self.nodes[n.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> NodeRef {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> NodeRef {
        self.push(value, Op::Leaf, true)
    }

    /// Inserts a parameter leaf, reusing the node if it was already added.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeRef {
        if let Some(i) = self.params.get(&id) {
            return NodeRef(*i);
        }
        let trainable = !self.frozen_params;
        let node = self.push(store.get(id).clone(), Op::Leaf, trainable);
        self.params.insert(id, node.0);
        node
    }

    fn unary(&mut self, x: NodeRef, op: Op, f: impl Fn(f64) -> f64) -> NodeRef {
        let v = self.val(x);
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|a| f(*a)).collect(),
        };
        let ng = self.needs(x.0);
        self.push(value, op, ng)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeRef,
        b: NodeRef,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeRef, GradError> {
        let (va, vb) = (self.val(a), self.val(b));
        same_shape(name, va, vb)?;
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)).collect(),
        };
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, GradError> {
        self.binary("add", a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, GradError> {
        self.binary("sub", a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, GradError> {
        self.binary("mul", a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, GradError> {
        self.binary("div", a, b, Op::Div(a.0, b.0), |x, y| x / y)
    }

    pub fn scale(&mut self, x: NodeRef, c: f64) -> NodeRef {
        self.unary(x, Op::Scale(x.0, c), |a| a * c)
    }

    pub fn neg(&mut self, x: NodeRef) -> NodeRef {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: NodeRef, c: f64) -> NodeRef {
        self.unary(x, Op::Offset(x.0), |a| a + c)
    }

    pub fn relu(&mut self, x: NodeRef) -> NodeRef {
        self.unary(x, Op::Relu(x.0), |a| a.max(0.0))
    }

    pub fn log(&mut self, x: NodeRef) -> NodeRef {
        self.unary(x, Op::Log(x.0), f64::ln)
    }

    pub fn exp(&mut self, x: NodeRef) -> NodeRef {
        self.unary(x, Op::Exp(x.0), f64::exp)
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: NodeRef) -> NodeRef {
        self.unary(x, Op::Sqrt(x.0), f64::sqrt)
    }

    pub fn square(&mut self, x: NodeRef) -> NodeRef {
        self.unary(x, Op::Square(x.0), |a| a * a)
    }

    pub fn softplus(&mut self, x: NodeRef) -> NodeRef {
        self.unary(x, Op::Softplus(x.0), softplus)
    }

    pub fn sum(&mut self, x: NodeRef) -> NodeRef {
        let s = self.val(x).data.iter().sum();
        let ng = self.needs(x.0);
        self.push(Tensor::scalar(s), Op::SumAll(x.0), ng)
    }

    pub fn mean(&mut self, x: NodeRef) -> NodeRef {
        let n = self.val(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    fn reduced_shape(shape: &[usize]) -> Vec<usize> {
        shape[..shape.len().saturating_sub(1)].to_vec()
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, x: NodeRef) -> NodeRef {
        let v = self.val(x);
        let k = v.last_dim();
        let value = Tensor {
            shape: Self::reduced_shape(&v.shape),
            data: v.data.chunks_exact(k).map(|r| r.iter().sum()).collect(),
        };
        let ng = self.needs(x.0);
        self.push(value, Op::SumLast(x.0), ng)
    }

    pub fn mean_last(&mut self, x: NodeRef) -> NodeRef {
        let k = self.val(x).last_dim() as f64;
        let s = self.sum_last(x);
        self.scale(s, 1.0 / k)
    }

    pub fn logsumexp_last(&mut self, x: NodeRef) -> NodeRef {
        let v = self.val(x);
        let value = Tensor {
            shape: Self::reduced_shape(&v.shape),
            data: logsumexp_rows(&v.data, v.last_dim()),
        };
        let ng = self.needs(x.0);
        self.push(value, Op::LogSumExpLast(x.0), ng)
    }

    pub fn softmax_last(&mut self, x: NodeRef) -> NodeRef {
        let v = self.val(x);
        let value = Tensor {
            shape: v.shape.clone(),
            data: softmax_rows(&v.data, v.last_dim()),
        };
        let ng = self.needs(x.0);
        self.push(value, Op::SoftmaxLast(x.0), ng)
    }

    pub fn log_softmax_last(&mut self, x: NodeRef) -> NodeRef {
        let v = self.val(x);
        let k = v.last_dim();
        let lse = logsumexp_rows(&v.data, k);
        let data = v
            .data
            .chunks_exact(k)
            .zip(&lse)
            .flat_map(|(row, l)| row.iter().map(move |a| a - l))
            .collect();
        let value = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let ng = self.needs(x.0);
        self.push(value, Op::LogSoftmaxLast(x.0), ng)
    }

    pub fn reshape(&mut self, x: NodeRef, shape: &[usize]) -> Result<NodeRef, GradError> {
        let value = self.val(x).clone().reshaped(shape.to_vec())?;
        let ng = self.needs(x.0);
        Ok(self.push(value, Op::Reshape(x.0), ng))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: NodeRef) -> Result<NodeRef, GradError> {
        let shape = self.val(x).shape.clone();
        let n = shape.first().copied().unwrap_or(1);
        let rest = shape.iter().skip(1).product();
        self.reshape(x, &[n, rest])
    }

    /// Elements `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: NodeRef, start: usize, len: usize) -> Result<NodeRef, GradError> {
        let v = self.val(x);
        let k = v.last_dim();
        if start + len > k {
            return Err(mismatch("slice_last", format!("{start}+{len} > {k}")));
        }
        let data = v
            .data
            .chunks_exact(k)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let mut shape = v.shape.clone();
        *shape.last_mut().ok_or_else(|| mismatch("slice_last", "scalar input"))? = len;
        let ng = self.needs(x.0);
        Ok(self.push(Tensor { shape, data }, Op::SliceLast { x: x.0, start }, ng))
    }

    pub fn concat_last(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, GradError> {
        let (va, vb) = (self.val(a), self.val(b));
        let (ka, kb) = (va.last_dim(), vb.last_dim());
        if va.shape.is_empty()
            || Self::reduced_shape(&va.shape) != Self::reduced_shape(&vb.shape)
        {
            return Err(mismatch("concat_last", format!("{:?} vs {:?}", va.shape, vb.shape)));
        }
        let data = va
            .data
            .chunks_exact(ka)
            .zip(vb.data.chunks_exact(kb))
            .flat_map(|(x, y)| x.iter().chain(y).copied())
            .collect();
        let mut shape = va.shape.clone();
        *shape.last_mut().expect("non-scalar") = ka + kb;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Tensor { shape, data }, Op::ConcatLast(a.0, b.0), ng))
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, GradError> {
        let (va, vb) = (self.val(a), self.val(b));
        let (n, k, m) = match (va.shape.as_slice(), vb.shape.as_slice()) {
            ([n, k], [k2, m]) if k == k2 => (*n, *k, *m),
            _ => return Err(mismatch("matmul", format!("{:?} x {:?}", va.shape, vb.shape))),
        };
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, &va.data, Gemm::N, &vb.data, Gemm::N, &mut out, false);
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::MatMul(a.0, b.0), ng))
    }

    /// Adds a `[f]` bias along the last axis of `x`.
    pub fn add_bias(&mut self, x: NodeRef, bias: NodeRef) -> Result<NodeRef, GradError> {
        let (vx, vb) = (self.val(x), self.val(bias));
        let f = vx.last_dim();
        if vb.shape != [f] {
            return Err(mismatch("add_bias", format!("{:?} + {:?}", vx.shape, vb.shape)));
        }
        let data = vx
            .data
            .chunks_exact(f)
            .flat_map(|r| r.iter().zip(&vb.data).map(|(a, b)| a + b))
            .collect();
        let value = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        let ng = self.needs(x.0) || self.needs(bias.0);
        Ok(self.push(value, Op::AddBias(x.0, bias.0), ng))
    }

    fn conv_dims(&self, x: NodeRef, w: NodeRef, stride: usize) -> Result<ConvDims, GradError> {
        let (vx, vw) = (self.val(x), self.val(w));
        match (vx.shape.as_slice(), vw.shape.as_slice()) {
            ([n, c, h, wd], [f, c2, k, k2]) if c == c2 && k == k2 && *k <= *h && *k <= *wd && stride > 0 => {
                Ok(ConvDims {
                    n: *n,
                    c: *c,
                    h: *h,
                    w: *wd,
                    f: *f,
                    k: *k,
                    stride,
                    oh: (h - k) / stride + 1,
                    ow: (wd - k) / stride + 1,
                })
            }
            _ => Err(mismatch(
                "conv2d",
                format!("input {:?}, kernel {:?}, stride {stride}", vx.shape, vw.shape),
            )),
        }
    }

    /// Valid-padding 2-D convolution: `[n, c, h, w] * [f, c, k, k] + [f]`.
    pub fn conv2d(&mut self, x: NodeRef, w: NodeRef, b: NodeRef, stride: usize) -> Result<NodeRef, GradError> {
        let d = self.conv_dims(x, w, stride)?;
        if self.val(b).shape != [d.f] {
            return Err(mismatch("conv2d", format!("bias {:?} for {} filters", self.val(b).shape, d.f)));
        }
        let (patch, p) = (d.patch(), d.positions());
        let keep_cols = self.needs(w.0);
        let mut cols = vec![0.0; if keep_cols { d.n * patch * p } else { patch * p }];
        let mut out = vec![0.0; d.n * d.f * p];
        let (vx, vw, vb) = (self.val(x), self.val(w), self.val(b));
        for i in 0..d.n {
            let xi = &vx.data[i * d.c * d.h * d.w..(i + 1) * d.c * d.h * d.w];
            let ci = if keep_cols {
                &mut cols[i * patch * p..(i + 1) * patch * p]
            } else {
                &mut cols[..]
            };
            im2col(&d, xi, ci);
            let oi = &mut out[i * d.f * p..(i + 1) * d.f * p];
            gemm(d.f, patch, p, &vw.data, Gemm::N, ci, Gemm::N, oi, false);
            for (row, bias) in oi.chunks_exact_mut(p).zip(&vb.data) {
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        if !keep_cols {
            cols = Vec::new();
        }
        let value = Tensor {
            shape: vec![d.n, d.f, d.oh, d.ow],
            data: out,
        };
        let ng = self.needs(x.0) || self.needs(w.0) || self.needs(b.0);
        Ok(self.push(
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                cols,
            },
            ng,
        ))
    }

    /// Valid max pooling over `size x size` windows; ties go to the first maximum.
    pub fn max_pool2d(&mut self, x: NodeRef, size: usize, stride: usize) -> Result<NodeRef, GradError> {
        let v = self.val(x);
        let (n, c, h, w) = match v.shape.as_slice() {
            [n, c, h, w] if size > 0 && stride > 0 && size <= *h && size <= *w => (*n, *c, *h, *w),
            _ => return Err(mismatch("max_pool2d", format!("input {:?}, window {size}", v.shape))),
        };
        let (oh, ow) = ((h - size) / stride + 1, (w - size) / stride + 1);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if v.data[idx] > v.data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(v.data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor {
            shape: vec![n, c, oh, ow],
            data: out,
        };
        let ng = self.needs(x.0);
        Ok(self.push(value, Op::MaxPool2d { x: x.0, argmax }, ng))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeRef) -> Result<Gradients, GradError> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(GradError::NonScalarLoss(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients {
            leaves: grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
            params: self.params.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value.data;
        let v = |j: usize| &self.nodes[j].value;
        let want = |j: usize| self.nodes[j].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if want(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if want(*b) {
                    accumulate(grads, *b, g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.iter().zip(&v(*b).data).map(|(g, y)| g * y).collect());
                }
                if want(*b) {
                    accumulate(grads, *b, g.iter().zip(&v(*a).data).map(|(g, x)| g * x).collect());
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (&v(*a).data, &v(*b).data);
                if want(*a) {
                    accumulate(grads, *a, g.iter().zip(vb).map(|(g, d)| g / d).collect());
                }
                if want(*b) {
                    let c = g.iter().zip(va).zip(vb).map(|((g, n), d)| -g * n / (d * d)).collect();
                    accumulate(grads, *b, c);
                }
            }
            Op::Scale(x, c) => accumulate(grads, *x, g.iter().map(|g| g * c).collect()),
            Op::Offset(x) | Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Relu(x) => {
                let c = g.iter().zip(&v(*x).data).map(|(g, a)| if *a > 0.0 { *g } else { 0.0 }).collect();
                accumulate(grads, *x, c);
            }
            Op::Log(x) => accumulate(grads, *x, g.iter().zip(&v(*x).data).map(|(g, a)| g / a).collect()),
            Op::Exp(x) => accumulate(grads, *x, g.iter().zip(y).map(|(g, e)| g * e).collect()),
            Op::Sqrt(x) => {
                let c = g
                    .iter()
                    .zip(y)
                    .map(|(g, r)| if *r > 0.0 { g * 0.5 / r } else { 0.0 })
                    .collect();
                accumulate(grads, *x, c);
            }
            Op::Square(x) => {
                accumulate(grads, *x, g.iter().zip(&v(*x).data).map(|(g, a)| 2.0 * g * a).collect());
            }
            Op::Softplus(x) => {
                accumulate(grads, *x, g.iter().zip(&v(*x).data).map(|(g, a)| g * sigmoid(*a)).collect());
            }
            Op::SumAll(x) => accumulate(grads, *x, vec![g[0]; v(*x).len()]),
            Op::SumLast(x) => {
                let k = v(*x).last_dim();
                accumulate(grads, *x, g.iter().flat_map(|gi| std::iter::repeat_n(*gi, k)).collect());
            }
            Op::LogSumExpLast(x) => {
                let vx = v(*x);
                let k = vx.last_dim();
                let c = vx
                    .data
                    .chunks_exact(k)
                    .zip(g.iter().zip(y))
                    .flat_map(|(row, (gi, l))| row.iter().map(move |a| gi * (a - l).exp()))
                    .collect();
                accumulate(grads, *x, c);
            }
            Op::SoftmaxLast(x) => {
                let k = v(*x).last_dim();
                let mut c = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks_exact(k).zip(g.chunks_exact(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    c.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
                }
                accumulate(grads, *x, c);
            }
            Op::LogSoftmaxLast(x) => {
                let k = v(*x).last_dim();
                let mut c = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks_exact(k).zip(g.chunks_exact(k)) {
                    let total: f64 = gr.iter().sum();
                    c.extend(yr.iter().zip(gr).map(|(yi, gi)| gi - yi.exp() * total));
                }
                accumulate(grads, *x, c);
            }
            Op::SliceLast { x, start } => {
                let k = v(*x).last_dim();
                let len = node.value.last_dim();
                let mut c = vec![0.0; v(*x).len()];
                for (dst, src) in c.chunks_exact_mut(k).zip(g.chunks_exact(len)) {
                    dst[*start..start + len].copy_from_slice(src);
                }
                accumulate(grads, *x, c);
            }
            Op::ConcatLast(a, b) => {
                let (ka, kb) = (v(*a).last_dim(), v(*b).last_dim());
                let rows = g.chunks_exact(ka + kb);
                if want(*a) {
                    accumulate(grads, *a, rows.clone().flat_map(|r| r[..ka].iter().copied()).collect());
                }
                if want(*b) {
                    accumulate(grads, *b, rows.flat_map(|r| r[ka..].iter().copied()).collect());
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (v(*a), v(*b));
                let (n, k, m) = (va.shape[0], va.shape[1], vb.shape[1]);
                if want(*a) {
                    let mut da = vec![0.0; n * k];
                    gemm(n, m, k, g, Gemm::N, &vb.data, Gemm::T, &mut da, false);
                    accumulate(grads, *a, da);
                }
                if want(*b) {
                    let mut db = vec![0.0; k * m];
                    gemm(k, n, m, &va.data, Gemm::T, g, Gemm::N, &mut db, false);
                    accumulate(grads, *b, db);
                }
            }
            Op::AddBias(x, b) => {
                if want(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if want(*b) {
                    let f = v(*b).len();
                    let mut db = vec![0.0; f];
                    for row in g.chunks_exact(f) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, b, stride, cols } => {
                let d = self
                    .conv_dims(NodeRef(*x), NodeRef(*w), *stride)
                    .expect("validated in forward");
                let (patch, p) = (d.patch(), d.positions());
                if want(*b) {
                    let mut db = vec![0.0; d.f];
                    for gi in g.chunks_exact(d.f * p) {
                        for (acc, row) in db.iter_mut().zip(gi.chunks_exact(p)) {
                            *acc += row.iter().sum::<f64>();
                        }
                    }
                    accumulate(grads, *b, db);
                }
                if want(*w) {
                    let mut dw = vec![0.0; d.f * patch];
                    for i in 0..d.n {
                        let gi = &g[i * d.f * p..(i + 1) * d.f * p];
                        let ci = &cols[i * patch * p..(i + 1) * patch * p];
                        gemm(d.f, p, patch, gi, Gemm::N, ci, Gemm::T, &mut dw, true);
                    }
                    accumulate(grads, *w, dw);
                }
                if want(*x) {
                    let img = d.c * d.h * d.w;
                    let mut dx = vec![0.0; d.n * img];
                    let mut dcols = vec![0.0; patch * p];
                    for i in 0..d.n {
                        let gi = &g[i * d.f * p..(i + 1) * d.f * p];
                        gemm(patch, d.f, p, &v(*w).data, Gemm::T, gi, Gemm::N, &mut dcols, false);
                        col2im(&d, &dcols, &mut dx[i * img..(i + 1) * img]);
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![0.0; v(*x).len()];
                for (gi, idx) in g.iter().zip(argmax) {
                    dx[*idx] += gi;
                }
                accumulate(grads, *x, dx);
            }
        }
    }
}
