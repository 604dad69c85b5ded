//! Layers, sequential stacks and shape descriptions.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::conv::{ConvGeom, Padding};
use crate::error::NeuralError;
use crate::params::{BufferId, ParamId, ParamStore, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-pass state: train/eval mode, randomness, and running-statistic updates.
pub struct Ctx<'a> {
    pub train: bool,
    pub rng: &'a mut dyn RngCore,
    /// Running-statistic updates produced by train-mode batchnorm, applied by the caller.
    pub stat_updates: Vec<(BufferId, Tensor)>,
}

impl<'a> Ctx<'a> {
    pub fn train(rng: &'a mut dyn RngCore) -> Self {
        Ctx {
            train: true,
            rng,
            stat_updates: Vec::new(),
        }
    }

    pub fn eval(rng: &'a mut dyn RngCore) -> Self {
        Ctx {
            train: false,
            rng,
            stat_updates: Vec::new(),
        }
    }

    pub fn apply_updates(&mut self, store: &mut ParamStore) {
        for (id, t) in self.stat_updates.drain(..) {
            store.set_buffer(id, t);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv1d,
    Tconv1d,
    Conv2d,
    Tconv2d,
    DilatedConv2d,
    Maxpool2d,
    Dense,
    Batchnorm,
    Dropout,
    Relu,
    Leakyrelu,
    Tanh,
    Sigmoid,
    Lstm,
    Bidilstm,
    Attention,
    PhaseShuffle,
    Reshape,
}

/// One row of a model description: operation, kernel shape, output shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRow {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: Option<Vec<usize>>,
    pub output: Vec<usize>,
}

pub fn glorot<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -limit, limit, rng)
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inputs: usize,
    pub units: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        units: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}/kernel"), glorot(&[inputs, units], inputs, units, rng));
        let b = bias.then(|| store.add(format!("{name}/bias"), Tensor::zeros(&[units])));
        Dense { w, b, inputs, units }
    }

    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Var {
        let h = tape.matmul(x, pv[self.w]);
        match self.b {
            Some(b) => tape.add_bias(h, pv[b]),
            None => h,
        }
    }

    /// Directional derivative: the bias drops out.
    pub fn tangent(&self, tape: &mut Tape, pv: &ParamVars, xdot: Var) -> Var {
        tape.matmul(xdot, pv[self.w])
    }

    fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>, NeuralError> {
        if input.last() != Some(&self.inputs) {
            return Err(NeuralError::ShapeMismatch(format!(
                "dense expects last dim {}, got {:?}",
                self.inputs, input
            )));
        }
        let mut s = input.to_vec();
        *s.last_mut().unwrap() = self.units;
        Ok(s)
    }
}

/// Convolution or transposed convolution over 1 or 2 spatial axes, channel-last.
///
/// Kernels are stored `[K, Cin, Cout]` (1D) or `[KH, KW, Cin, Cout]` (2D).
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spatial: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub dilation: [usize; 2],
    pub padding: Padding,
    pub cin: usize,
    pub cout: usize,
    pub transposed: bool,
}

/// Construction parameters for [`Conv`]; 1D layers use the second entry of each pair.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub spatial: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub dilation: [usize; 2],
    pub padding: Padding,
    pub cin: usize,
    pub cout: usize,
    pub transposed: bool,
    pub bias: bool,
}

impl ConvSpec {
    pub fn conv1d(k: usize, stride: usize, cin: usize, cout: usize) -> Self {
        ConvSpec {
            spatial: 1,
            kernel: [1, k],
            stride: [1, stride],
            dilation: [1, 1],
            padding: Padding::Same,
            cin,
            cout,
            transposed: false,
            bias: true,
        }
    }

    pub fn conv2d(k: [usize; 2], stride: [usize; 2], cin: usize, cout: usize) -> Self {
        ConvSpec {
            spatial: 2,
            kernel: k,
            stride,
            dilation: [1, 1],
            padding: Padding::Same,
            cin,
            cout,
            transposed: false,
            bias: true,
        }
    }

    pub fn transposed(mut self) -> Self {
        self.transposed = true;
        self
    }

    pub fn padding(mut self, p: Padding) -> Self {
        self.padding = p;
        self
    }

    pub fn dilation(mut self, d: [usize; 2]) -> Self {
        self.dilation = d;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut R) -> Self {
        assert!(spec.spatial == 1 || spec.spatial == 2, "1 or 2 spatial axes");
        let taps = spec.kernel[0] * spec.kernel[1];
        let shape = if spec.spatial == 1 {
            vec![spec.kernel[1], spec.cin, spec.cout]
        } else {
            vec![spec.kernel[0], spec.kernel[1], spec.cin, spec.cout]
        };
        let w = store.add(
            format!("{name}/kernel"),
            glorot(&shape, taps * spec.cin, taps * spec.cout, rng),
        );
        let b = spec
            .bias
            .then(|| store.add(format!("{name}/bias"), Tensor::zeros(&[spec.cout])));
        Conv {
            w,
            b,
            spatial: spec.spatial,
            kernel: spec.kernel,
            stride: spec.stride,
            dilation: spec.dilation,
            padding: spec.padding,
            cin: spec.cin,
            cout: spec.cout,
            transposed: spec.transposed,
        }
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        if self.spatial == 1 {
            vec![self.kernel[1], self.cin, self.cout]
        } else {
            vec![self.kernel[0], self.kernel[1], self.cin, self.cout]
        }
    }

    fn geom(&self, input: &[usize]) -> Result<ConvGeom, NeuralError> {
        if input.len() != self.spatial + 2 || input[input.len() - 1] != self.cin {
            return Err(NeuralError::ShapeMismatch(format!(
                "conv expects rank {} with {} channels, got {:?}",
                self.spatial + 2,
                self.cin,
                input
            )));
        }
        let sp = if self.spatial == 1 {
            [1, input[1]]
        } else {
            [input[1], input[2]]
        };
        if self.transposed {
            ConvGeom::transposed(sp, self.kernel, self.stride, self.dilation, self.padding)
        } else {
            ConvGeom::conv(sp, self.kernel, self.stride, self.dilation, self.padding)
        }
    }

    fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>, NeuralError> {
        let g = self.geom(input)?;
        let sp = if self.transposed { g.field } else { g.grid };
        Ok(if self.spatial == 1 {
            vec![input[0], sp[1], self.cout]
        } else {
            vec![input[0], sp[0], sp[1], self.cout]
        })
    }

    fn apply(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Var {
        let geom = self.geom(tape.shape(x)).expect("conv input shape");
        if self.transposed {
            tape.tconv(x, pv[self.w], geom)
        } else {
            tape.conv(x, pv[self.w], geom)
        }
    }

    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Var {
        let y = self.apply(tape, pv, x);
        match self.b {
            Some(b) => tape.add_bias(y, pv[b]),
            None => y,
        }
    }

    pub fn tangent(&self, tape: &mut Tape, pv: &ParamVars, xdot: Var) -> Var {
        self.apply(tape, pv, xdot)
    }

    fn kind(&self) -> LayerKind {
        match (self.spatial, self.transposed) {
            (1, false) => LayerKind::Conv1d,
            (1, true) => LayerKind::Tconv1d,
            (_, true) => LayerKind::Tconv2d,
            _ if self.dilation != [1, 1] => LayerKind::DilatedConv2d,
            _ => LayerKind::Conv2d,
        }
    }
}

/// Batch normalisation over the last axis with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: f64,
    pub eps: f64,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}/gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}/beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}/moving_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}/moving_variance"), Tensor::full(&[channels], 1.0)),
            momentum: 0.9,
            eps: 1e-5,
            channels,
        }
    }

    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, store: &ParamStore, x: Var, ctx: &mut Ctx) -> Var {
        if ctx.train {
            let (y, stats) = tape.batch_norm_train(x, pv[self.gamma], pv[self.beta], self.eps);
            let m = self.momentum;
            let blend = |old: &Tensor, new: &[f64]| {
                Tensor::vector(old.data().iter().zip(new).map(|(o, n)| m * o + (1.0 - m) * n).collect())
            };
            let rm = blend(store.buffer(self.running_mean), &stats.mean);
            let rv = blend(store.buffer(self.running_var), &stats.var);
            ctx.stat_updates.push((self.running_mean, rm));
            ctx.stat_updates.push((self.running_var, rv));
            y
        } else {
            tape.batch_norm_eval(
                x,
                pv[self.gamma],
                pv[self.beta],
                store.buffer(self.running_mean).data(),
                store.buffer(self.running_var).data(),
                self.eps,
            )
        }
    }
}

/// Inverted dropout: train-mode units survive with probability `keep` and are scaled by `1/keep`.
pub fn dropout(tape: &mut Tape, x: Var, keep: f64, ctx: &mut Ctx) -> Var {
    if !ctx.train || keep >= 1.0 {
        return x;
    }
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| if ctx.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    tape.mul_const(x, Tensor::new(shape, mask).unwrap())
}

#[derive(Clone, Debug)]
pub enum Layer {
    Dense(Dense),
    Conv(Conv),
    MaxPool2d { kernel: [usize; 2], stride: [usize; 2] },
    BatchNorm(BatchNorm),
    Dropout { keep: f64 },
    Relu,
    LeakyRelu { alpha: f64 },
    Tanh,
    Sigmoid,
    /// Reshape to `[B, shape...]`.
    Reshape { shape: Vec<usize> },
    PhaseShuffle { n: usize },
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Conv(c) => c.kind(),
            Layer::MaxPool2d { .. } => LayerKind::Maxpool2d,
            Layer::BatchNorm(_) => LayerKind::Batchnorm,
            Layer::Dropout { .. } => LayerKind::Dropout,
            Layer::Relu => LayerKind::Relu,
            Layer::LeakyRelu { .. } => LayerKind::Leakyrelu,
            Layer::Tanh => LayerKind::Tanh,
            Layer::Sigmoid => LayerKind::Sigmoid,
            Layer::Reshape { .. } => LayerKind::Reshape,
            Layer::PhaseShuffle { .. } => LayerKind::PhaseShuffle,
        }
    }

    pub fn kernel_shape(&self) -> Option<Vec<usize>> {
        match self {
            Layer::Dense(d) => Some(vec![d.inputs, d.units]),
            Layer::Conv(c) => Some(c.kernel_shape()),
            Layer::MaxPool2d { kernel, .. } => Some(kernel.to_vec()),
            _ => None,
        }
    }

    pub fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>, NeuralError> {
        match self {
            Layer::Dense(d) => d.out_shape(input),
            Layer::Conv(c) => c.out_shape(input),
            Layer::MaxPool2d { kernel, stride } => {
                if input.len() != 4 || input[1] < kernel[0] || input[2] < kernel[1] {
                    return Err(NeuralError::ShapeMismatch(format!("maxpool input {input:?}")));
                }
                Ok(vec![
                    input[0],
                    (input[1] - kernel[0]) / stride[0] + 1,
                    (input[2] - kernel[1]) / stride[1] + 1,
                    input[3],
                ])
            }
            Layer::Reshape { shape } => {
                let have: usize = input[1..].iter().product();
                let want: usize = shape.iter().product();
                if have != want {
                    return Err(NeuralError::ShapeMismatch(format!("cannot reshape {input:?} to {shape:?}")));
                }
                let mut s = vec![input[0]];
                s.extend_from_slice(shape);
                Ok(s)
            }
            Layer::PhaseShuffle { .. } if input.len() != 3 => {
                Err(NeuralError::ShapeMismatch(format!("phase shuffle needs [B, L, C], got {input:?}")))
            }
            _ => Ok(input.to_vec()),
        }
    }
}

/// Draw one shift per example in `[-n, n]`.
pub fn draw_shifts(batch: usize, n: usize, rng: &mut dyn RngCore) -> Vec<isize> {
    (0..batch).map(|_| rng.gen_range(-(n as isize)..=n as isize)).collect()
}

/// A linear stack of named layers.
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub layers: Vec<(String, Layer)>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, layer: Layer) {
        self.layers.push((name.into(), layer));
    }

    pub fn phase_shuffle_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|(_, l)| matches!(l, Layer::PhaseShuffle { .. }))
            .count()
    }

    /// Draw shifts for every phase-shuffle layer.
    pub fn draw_shuffles(&self, batch: usize, rng: &mut dyn RngCore) -> Vec<Vec<isize>> {
        self.layers
            .iter()
            .filter_map(|(_, l)| match l {
                Layer::PhaseShuffle { n } => Some(draw_shifts(batch, *n, rng)),
                _ => None,
            })
            .collect()
    }

    /// Shape-only pass producing one row per layer.
    pub fn describe(&self, input: &[usize]) -> Result<Vec<LayerRow>, NeuralError> {
        let mut shape = input.to_vec();
        let mut rows = Vec::with_capacity(self.layers.len());
        for (name, layer) in &self.layers {
            shape = layer.out_shape(&shape)?;
            rows.push(LayerRow {
                name: name.clone(),
                kind: layer.kind(),
                kernel: layer.kernel_shape(),
                output: shape.clone(),
            });
        }
        Ok(rows)
    }

    /// Forward pass. `shuffles` supplies phase-shuffle shifts; when absent they
    /// are drawn from `ctx.rng` in train mode and disabled in eval mode.
    pub fn forward(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        store: &ParamStore,
        x: Var,
        ctx: &mut Ctx,
        shuffles: Option<&[Vec<isize>]>,
    ) -> Var {
        let mut h = x;
        let mut shuffle_idx = 0;
        for (_, layer) in &self.layers {
            h = match layer {
                Layer::Dense(d) => d.forward(tape, pv, h),
                Layer::Conv(c) => c.forward(tape, pv, h),
                Layer::MaxPool2d { kernel, stride } => tape.max_pool2d(h, *kernel, *stride),
                Layer::BatchNorm(bn) => bn.forward(tape, pv, store, h, ctx),
                Layer::Dropout { keep } => dropout(tape, h, *keep, ctx),
                Layer::Relu => tape.relu(h),
                Layer::LeakyRelu { alpha } => tape.leaky_relu(h, *alpha),
                Layer::Tanh => tape.tanh(h),
                Layer::Sigmoid => tape.sigmoid(h),
                Layer::Reshape { shape } => {
                    let mut s = vec![tape.shape(h)[0]];
                    s.extend_from_slice(shape);
                    tape.reshape(h, &s)
                }
                Layer::PhaseShuffle { n } => {
                    let batch = tape.shape(h)[0];
                    let shifts = match shuffles {
                        Some(s) => s[shuffle_idx].clone(),
                        None if ctx.train => draw_shifts(batch, *n, ctx.rng),
                        None => vec![0; batch],
                    };
                    shuffle_idx += 1;
                    if shifts.iter().all(|&s| s == 0) {
                        h
                    } else {
                        tape.phase_shuffle(h, shifts)
                    }
                }
            };
        }
        h
    }

    /// Forward pass together with the directional derivative along `xdot`.
    ///
    /// The tangent is recorded on the tape, so differentiating it with respect
    /// to parameters yields second-order (gradient-penalty) terms exactly.
    /// Only layers that are deterministic given `shuffles` are supported.
    pub fn forward_tangent(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        x: Var,
        xdot: Var,
        shuffles: &[Vec<isize>],
    ) -> Result<(Var, Var), NeuralError> {
        let (mut h, mut t) = (x, xdot);
        let mut shuffle_idx = 0;
        for (name, layer) in &self.layers {
            (h, t) = match layer {
                Layer::Dense(d) => (d.forward(tape, pv, h), d.tangent(tape, pv, t)),
                Layer::Conv(c) => (c.forward(tape, pv, h), c.tangent(tape, pv, t)),
                Layer::Relu => {
                    let mask = tape.value(h).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    (tape.relu(h), tape.mul_const(t, mask))
                }
                Layer::LeakyRelu { alpha } => {
                    let a = *alpha;
                    let mask = tape.value(h).map(|v| if v > 0.0 { 1.0 } else { a });
                    (tape.leaky_relu(h, a), tape.mul_const(t, mask))
                }
                Layer::Tanh => {
                    let y = tape.tanh(h);
                    let y2 = tape.mul(y, y);
                    let ones = tape.constant(Tensor::full(tape.shape(y), 1.0));
                    let dy = tape.sub(ones, y2);
                    (y, tape.mul(t, dy))
                }
                Layer::Reshape { shape } => {
                    let mut s = vec![tape.shape(h)[0]];
                    s.extend_from_slice(shape);
                    (tape.reshape(h, &s), tape.reshape(t, &s))
                }
                Layer::PhaseShuffle { .. } => {
                    let shifts = shuffles[shuffle_idx].clone();
                    shuffle_idx += 1;
                    (tape.phase_shuffle(h, shifts.clone()), tape.phase_shuffle(t, shifts))
                }
                other => {
                    return Err(NeuralError::InvalidConfig(format!(
                        "layer {name} ({:?}) has no tangent rule",
                        other.kind()
                    )))
                }
            };
        }
        Ok((h, t))
    }
}
