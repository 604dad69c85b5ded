//! Reverse-mode automatic differentiation over an explicit operation record.
//!
//! Every operation appends a node holding its output value and enough
//! context to produce input gradients. [`Tape::backward`] walks the record
//! in reverse and returns gradients for the leaves that track them.

use std::fmt;

use crate::conv::{self, ConvGeom};
use crate::gemm::gemm;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Extension point for operations defined outside this crate.
///
/// `backward` receives the input values, the output value and the gradient
/// of the output, and returns one optional gradient per input.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    TConv {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        train: bool,
    },
    PhaseShuffle {
        x: Var,
        shifts: Vec<isize>,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    SelectTime {
        x: Var,
        t: usize,
    },
    StackTime(Vec<Var>),
    SoftmaxLast(Var),
    AttentionPool {
        alpha: Var,
        h: Var,
    },
    Custom {
        op: Box<dyn CustomOp>,
        inputs: Vec<Var>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode batch normalisation.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not participate.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn rows_of(t: &Tensor) -> usize {
    t.numel() / t.last_dim().max(1)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked (parameters, inputs under study).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// `x [..., C] + b [C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        assert_eq!(v.last_dim(), bias.len(), "bias length mismatch");
        for row in v.data_mut().chunks_mut(bias.len()) {
            for (o, bb) in row.iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        self.push(v, Op::AddBias(x, b), &[x, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Var {
        let v = self.value(x).zip_map(&c, |a, b| a * b);
        self.push(v, Op::MulConst(x, c), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(v, Op::Mean(x), &[x])
    }

    /// `a [..., K] · b [K, N]` → `[..., N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(tb.rank(), 2, "matmul rhs must be rank 2");
        let k = ta.last_dim();
        assert_eq!(tb.shape()[0], k, "matmul inner dims {:?} x {:?}", ta.shape(), tb.shape());
        let n = tb.shape()[1];
        let m = rows_of(ta);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let mut shape = ta.shape().to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        *shape.last_mut().unwrap() = n;
        let v = Tensor::new(shape, out).unwrap();
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape).expect("reshape size mismatch");
        self.push(v, Op::Reshape(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { alpha * a });
        self.push(v, Op::LeakyRelu(x, alpha), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    fn conv_dims(&self, x: Var) -> (usize, usize, bool) {
        let t = self.value(x);
        let one_d = t.rank() == 3;
        let batch = t.shape()[0];
        let ch = t.last_dim();
        (batch, ch, one_d)
    }

    /// Convolution of `x` (`[B, L, Cin]` or `[B, H, W, Cin]`) with `w [KH, KW, Cin, Cout]`
    /// (`[K, Cin, Cout]` for 1D).
    pub fn conv(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let (batch, cin, one_d) = self.conv_dims(x);
        let cout = self.value(w).last_dim();
        debug_assert_eq!(self.value(x).numel(), batch * geom.field_len() * cin);
        debug_assert_eq!(self.value(w).numel(), geom.taps() * cin * cout);
        let y = conv::conv_forward(self.value(x).data(), self.value(w).data(), batch, cin, cout, &geom);
        let shape = if one_d {
            vec![batch, geom.grid[1], cout]
        } else {
            vec![batch, geom.grid[0], geom.grid[1], cout]
        };
        let v = Tensor::new(shape, y).unwrap();
        self.push(v, Op::Conv { x, w, geom }, &[x, w])
    }

    /// Transposed convolution; `geom.grid` is the input extent, `geom.field` the output.
    pub fn tconv(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let (batch, cin, one_d) = self.conv_dims(x);
        let cout = self.value(w).last_dim();
        debug_assert_eq!(self.value(x).numel(), batch * geom.grid_len() * cin);
        let y = conv::tconv_forward(self.value(x).data(), self.value(w).data(), batch, cin, cout, &geom);
        let shape = if one_d {
            vec![batch, geom.field[1], cout]
        } else {
            vec![batch, geom.field[0], geom.field[1], cout]
        };
        let v = Tensor::new(shape, y).unwrap();
        self.push(v, Op::TConv { x, w, geom }, &[x, w])
    }

    /// Valid max pooling over `[B, H, W, C]`; ties resolve to the first element.
    pub fn max_pool2d(&mut self, x: Var, kernel: [usize; 2], stride: [usize; 2]) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        assert!(h >= kernel[0] && w >= kernel[1], "pool window larger than input");
        let oh = (h - kernel[0]) / stride[0] + 1;
        let ow = (w - kernel[1]) / stride[1] + 1;
        let data = t.data();
        let mut out = Vec::with_capacity(b * oh * ow * c);
        let mut argmax = Vec::with_capacity(b * oh * ow * c);
        for n in 0..b {
            for i in 0..oh {
                for j in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut at = 0;
                        for ki in 0..kernel[0] {
                            for kj in 0..kernel[1] {
                                let idx = ((n * h + i * stride[0] + ki) * w + j * stride[1] + kj) * c + ch;
                                if data[idx] > best {
                                    best = data[idx];
                                    at = idx;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(at);
                    }
                }
            }
        }
        let v = Tensor::new(vec![b, oh, ow, c], out).unwrap();
        self.push(v, Op::MaxPool { x, argmax }, &[x])
    }

    /// Batch normalisation over every axis but the last, with batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats) {
        let t = self.value(x);
        let c = t.last_dim();
        let n = rows_of(t) as f64;
        let mut mean = vec![0.0; c];
        for row in t.data().chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for row in t.data().chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.normalise(x, gamma, beta, &mean, inv_std, true);
        (out, BatchStats { mean, var })
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Var {
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.normalise(x, gamma, beta, mean, inv_std, false)
    }

    fn normalise(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: Vec<f64>, train: bool) -> Var {
        let t = self.value(x);
        let c = t.last_dim();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = t.clone();
        for row in xhat.data_mut().chunks_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let mut y = xhat.clone();
        for row in y.data_mut().chunks_mut(c) {
            for j in 0..c {
                row[j] = g[j] * row[j] + bt[j];
            }
        }
        self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        )
    }

    /// Shift each example of `x [B, L, C]` by `shifts[b]` samples along time,
    /// filling the exposed edge by reflection.
    pub fn phase_shuffle(&mut self, x: Var, shifts: Vec<isize>) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let (b, l, c) = (s[0], s[1], s[2]);
        assert_eq!(shifts.len(), b, "one shift per example");
        let mut out = vec![0.0; t.numel()];
        let data = t.data();
        for n in 0..b {
            for i in 0..l {
                let src = reflect(i as isize - shifts[n], l);
                let (d, s) = ((n * l + i) * c, (n * l + src) * c);
                out[d..d + c].copy_from_slice(&data[s..s + c]);
            }
        }
        let v = Tensor::new(s.to_vec(), out).unwrap();
        self.push(v, Op::PhaseShuffle { x, shifts }, &[x])
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let c = t.last_dim();
        assert!(start + len <= c);
        let mut out = Vec::with_capacity(rows_of(t) * len);
        for row in t.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let v = Tensor::new(shape, out).unwrap();
        self.push(v, Op::SliceLast { x, start }, &[x])
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        let rows = rows_of(self.value(parts[0]));
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let t = self.value(*p);
            assert_eq!(rows_of(t), rows, "concat row mismatch");
            for (r, row) in t.data().chunks(w).enumerate() {
                out[r * total + off..r * total + off + w].copy_from_slice(row);
            }
            off += w;
        }
        let mut shape = self.value(parts[0]).shape().to_vec();
        *shape.last_mut().unwrap() = total;
        let v = Tensor::new(shape, out).unwrap();
        self.push(v, Op::ConcatLast(parts.to_vec()), parts)
    }

    /// Time step `t` of `x [B, T, F]` → `[B, F]`.
    pub fn select_time(&mut self, x: Var, t: usize) -> Var {
        let v = self.value(x);
        let s = v.shape();
        let (b, len, f) = (s[0], s[1], s[2]);
        assert!(t < len);
        let mut out = Vec::with_capacity(b * f);
        for n in 0..b {
            out.extend_from_slice(&v.data()[(n * len + t) * f..(n * len + t + 1) * f]);
        }
        let v = Tensor::new(vec![b, f], out).unwrap();
        self.push(v, Op::SelectTime { x, t }, &[x])
    }

    /// Stack `T` tensors `[B, F]` into `[B, T, F]`.
    pub fn stack_time(&mut self, steps: &[Var]) -> Var {
        let s = self.value(steps[0]).shape().to_vec();
        let (b, f) = (s[0], s[1]);
        let t = steps.len();
        let mut out = vec![0.0; b * t * f];
        for (i, st) in steps.iter().enumerate() {
            let d = self.value(*st).data();
            for n in 0..b {
                out[(n * t + i) * f..(n * t + i + 1) * f].copy_from_slice(&d[n * f..(n + 1) * f]);
            }
        }
        let v = Tensor::new(vec![b, t, f], out).unwrap();
        self.push(v, Op::StackTime(steps.to_vec()), steps)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.last_dim();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxLast(x), &[x])
    }

    /// `out[b] = Σ_t alpha[b, t] · h[b, t, :]`.
    pub fn attention_pool(&mut self, alpha: Var, h: Var) -> Var {
        let (ta, th) = (self.value(alpha), self.value(h));
        let s = th.shape();
        let (b, t, f) = (s[0], s[1], s[2]);
        assert_eq!(ta.shape(), &[b, t]);
        let mut out = vec![0.0; b * f];
        for n in 0..b {
            for i in 0..t {
                let a = ta.data()[n * t + i];
                let row = &th.data()[(n * t + i) * f..(n * t + i + 1) * f];
                for (o, v) in out[n * f..(n + 1) * f].iter_mut().zip(row) {
                    *o += a * v;
                }
            }
        }
        let v = Tensor::new(vec![b, f], out).unwrap();
        self.push(v, Op::AttentionPool { alpha, h }, &[alpha, h])
    }

    /// Record an externally defined operation whose forward value is already computed.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], value: Tensor) -> Var {
        self.push(
            value,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            inputs,
        )
    }

    /// Gradients of the scalar `loss` with respect to every grad-tracking leaf.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        // interior nodes were consumed; only leaf gradients remain
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, g.clone());
                if self.wants(*b) {
                    let c = g.last_dim();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, Tensor::new(self.value(*b).shape().to_vec(), db).unwrap());
                }
            }
            Op::Scale(x, s) => acc(*x, g.scale(*s)),
            Op::MulConst(x, c) => acc(*x, g.zip_map(c, |a, b| a * b)),
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), g.item())),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                acc(*x, Tensor::full(self.shape(*x), g.item() / n))
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = ta.last_dim();
                let n = tb.shape()[1];
                let m = rows_of(ta);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, 0.0);
                    acc(*a, Tensor::new(ta.shape().to_vec(), da).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, 0.0);
                    acc(*b, Tensor::new(tb.shape().to_vec(), db).unwrap());
                }
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(self.shape(*x)).unwrap()),
            Op::Relu(x) => acc(*x, g.zip_map(self.value(*x), |d, v| if v > 0.0 { d } else { 0.0 })),
            Op::LeakyRelu(x, alpha) => {
                let a = *alpha;
                acc(*x, g.zip_map(self.value(*x), |d, v| if v > 0.0 { d } else { a * d }))
            }
            Op::Tanh(x) => acc(*x, g.zip_map(&node.value, |d, y| d * (1.0 - y * y))),
            Op::Sigmoid(x) => acc(*x, g.zip_map(&node.value, |d, y| d * y * (1.0 - y))),
            Op::Conv { x, w, geom } => {
                let (batch, cin, _) = self.conv_dims(*x);
                let tw = self.value(*w);
                let cout = tw.last_dim();
                let (dx, dw) = conv::conv_backward(
                    self.value(*x).data(),
                    tw.data(),
                    g.data(),
                    batch,
                    cin,
                    cout,
                    geom,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    acc(*x, Tensor::new(self.shape(*x).to_vec(), dx).unwrap());
                }
                if let Some(dw) = dw {
                    acc(*w, Tensor::new(tw.shape().to_vec(), dw).unwrap());
                }
            }
            Op::TConv { x, w, geom } => {
                let (batch, cin, _) = self.conv_dims(*x);
                let tw = self.value(*w);
                let cout = tw.last_dim();
                let (dx, dw) = conv::tconv_backward(
                    self.value(*x).data(),
                    tw.data(),
                    g.data(),
                    batch,
                    cin,
                    cout,
                    geom,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    acc(*x, Tensor::new(self.shape(*x).to_vec(), dx).unwrap());
                }
                if let Some(dw) = dw {
                    acc(*w, Tensor::new(tw.shape().to_vec(), dw).unwrap());
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for (gv, &at) in g.data().iter().zip(argmax) {
                    d[at] += gv;
                }
                acc(*x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = g.last_dim();
                let n = rows_of(g) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (grow, xrow) in g.data().chunks(c).zip(xhat.data().chunks(c)) {
                    for j in 0..c {
                        dgamma[j] += grow[j] * xrow[j];
                        dbeta[j] += grow[j];
                    }
                }
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(g.shape());
                    if *train {
                        for ((drow, grow), xrow) in dx
                            .data_mut()
                            .chunks_mut(c)
                            .zip(g.data().chunks(c))
                            .zip(xhat.data().chunks(c))
                        {
                            for j in 0..c {
                                let dxhat = grow[j] * gam[j];
                                // dbeta = Σ dy, dgamma = Σ dy·x̂
                                drow[j] = inv_std[j] / n
                                    * (n * dxhat - gam[j] * dbeta[j] - xrow[j] * gam[j] * dgamma[j]);
                            }
                        }
                    } else {
                        for (drow, grow) in dx.data_mut().chunks_mut(c).zip(g.data().chunks(c)) {
                            for j in 0..c {
                                drow[j] = grow[j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    acc(*x, dx);
                }
                let gshape = self.shape(*gamma).to_vec();
                acc(*gamma, Tensor::new(gshape.clone(), dgamma).unwrap());
                acc(*beta, Tensor::new(gshape, dbeta).unwrap());
            }
            Op::PhaseShuffle { x, shifts } => {
                let s = g.shape();
                let (b, l, c) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; g.numel()];
                for n in 0..b {
                    for i in 0..l {
                        let src = reflect(i as isize - shifts[n], l);
                        for ch in 0..c {
                            dx[(n * l + src) * c + ch] += g.data()[(n * l + i) * c + ch];
                        }
                    }
                }
                acc(*x, Tensor::new(s.to_vec(), dx).unwrap());
            }
            Op::SliceLast { x, start } => {
                let full = self.value(*x).last_dim();
                let len = g.last_dim();
                let mut dx = Tensor::zeros(self.shape(*x));
                for (drow, grow) in dx.data_mut().chunks_mut(full).zip(g.data().chunks(len)) {
                    drow[*start..*start + len].copy_from_slice(grow);
                }
                acc(*x, dx);
            }
            Op::ConcatLast(parts) => {
                let total = g.last_dim();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(rows_of(g) * w);
                        for row in g.data().chunks(total) {
                            d.extend_from_slice(&row[off..off + w]);
                        }
                        acc(*p, Tensor::new(self.shape(*p).to_vec(), d).unwrap());
                    }
                    off += w;
                }
            }
            Op::SelectTime { x, t } => {
                let s = self.shape(*x);
                let (b, len, f) = (s[0], s[1], s[2]);
                let mut dx = Tensor::zeros(s);
                for n in 0..b {
                    dx.data_mut()[(n * len + t) * f..(n * len + t + 1) * f]
                        .copy_from_slice(&g.data()[n * f..(n + 1) * f]);
                }
                acc(*x, dx);
            }
            Op::StackTime(steps) => {
                let s = g.shape();
                let (b, t, f) = (s[0], s[1], s[2]);
                for (i, st) in steps.iter().enumerate() {
                    if !self.wants(*st) {
                        continue;
                    }
                    let mut d = Vec::with_capacity(b * f);
                    for n in 0..b {
                        d.extend_from_slice(&g.data()[(n * t + i) * f..(n * t + i + 1) * f]);
                    }
                    acc(*st, Tensor::new(vec![b, f], d).unwrap());
                }
            }
            Op::SoftmaxLast(x) => {
                let c = g.last_dim();
                let mut dx = Tensor::zeros(g.shape());
                for ((drow, grow), yrow) in dx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(g.data().chunks(c))
                    .zip(node.value.data().chunks(c))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::AttentionPool { alpha, h } => {
                let (ta, th) = (self.value(*alpha), self.value(*h));
                let s = th.shape();
                let (b, t, f) = (s[0], s[1], s[2]);
                if self.wants(*alpha) {
                    let mut da = vec![0.0; b * t];
                    for n in 0..b {
                        let gr = &g.data()[n * f..(n + 1) * f];
                        for i in 0..t {
                            let row = &th.data()[(n * t + i) * f..(n * t + i + 1) * f];
                            da[n * t + i] = gr.iter().zip(row).map(|(x, y)| x * y).sum();
                        }
                    }
                    acc(*alpha, Tensor::new(vec![b, t], da).unwrap());
                }
                if self.wants(*h) {
                    let mut dh = vec![0.0; b * t * f];
                    for n in 0..b {
                        let gr = &g.data()[n * f..(n + 1) * f];
                        for i in 0..t {
                            let a = ta.data()[n * t + i];
                            for (d, gv) in dh[(n * t + i) * f..(n * t + i + 1) * f].iter_mut().zip(gr) {
                                *d = a * gv;
                            }
                        }
                    }
                    acc(*h, Tensor::new(s.to_vec(), dh).unwrap());
                }
            }
            Op::Custom { op, inputs } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = op.backward(&vals, &node.value, g);
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        acc(*v, gi);
                    }
                }
            }
        }
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

/// Reflect an index into `[0, len)` without repeating the edge sample.
pub(crate) fn reflect(i: isize, len: usize) -> usize {
    let l = len as isize;
    if l == 1 {
        return 0;
    }
    let period = 2 * (l - 1);
    let mut j = i.rem_euclid(period);
    if j >= l {
        j = period - j;
    }
    j as usize
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 5), 3);
    }

    #[test]
    fn dense_gradient_matches_closed_form() {
        // y = sum(x·W + b), dy/dW[i][j] = x[i], dy/db = 1
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let w = tape.leaf(Tensor::new(vec![3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
        let b = tape.leaf(Tensor::vector(vec![0.0, 1.0]));
        let h = tape.matmul(x, w);
        let y = tape.add_bias(h, b);
        let l = tape.sum(y);
        let g = tape.backward(l);
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0, -2.0, -2.0, 0.5, 0.5]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 1.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn non_participating_leaf_gets_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::scalar(5.0));
        let b = tape.mul(a, a);
        let g = tape.backward(b);
        assert_eq!(g.get(a).unwrap().item(), 4.0);
        assert_eq!(g.get_or_zeros(unused, &Tensor::scalar(0.0)).item(), 0.0);
    }
}
