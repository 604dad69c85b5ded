//! Attention-based dilated convolutional-recurrent classifier and its
//! softmax / center / contrastive-center loss family.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ser_neural::checkpoint;
use ser_neural::layers::dropout;
use ser_neural::{
    Adam, Attention, BatchNorm, BiDilatedLstm, Conv, ConvSpec, CustomOp, Ctx, Dense, Layer, LayerKind, LayerRow,
    NeuralError, Padding, ParamStore, ParamVars, Tape, Tensor, Var,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdcrnnError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("feature shape {found:?} does not match the model input {expected:?}")]
    FeatureShape { expected: Vec<usize>, found: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("no training examples")]
    EmptyFold,
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdcrnnConfig {
    pub classes: usize,
    /// Per-example input `[frames, mel bands, channels]`.
    pub input: [usize; 3],
    pub conv_maps: usize,
    pub conv_kernel: [usize; 2],
    pub pool: [usize; 2],
    pub dilated_maps: usize,
    pub dilated_layers: usize,
    pub dilation: usize,
    pub linear_units: usize,
    pub lstm_units: usize,
    pub lstm_dilations: Vec<usize>,
    pub fcn_units: usize,
    pub keep_prob: f64,
}

impl AdcrnnConfig {
    pub fn full(classes: usize) -> Self {
        AdcrnnConfig {
            classes,
            input: [300, 40, 3],
            conv_maps: 128,
            conv_kernel: [3, 3],
            pool: [2, 4],
            dilated_maps: 256,
            dilated_layers: 3,
            dilation: 2,
            linear_units: 512,
            lstm_units: 512,
            lstm_dilations: vec![1, 2],
            fcn_units: 64,
            keep_prob: 0.5,
        }
    }

    pub fn toy(classes: usize) -> Self {
        AdcrnnConfig {
            conv_maps: 8,
            dilated_maps: 16,
            linear_units: 32,
            lstm_units: 32,
            fcn_units: 16,
            ..Self::full(classes)
        }
    }

    /// Spatial size after the valid convolution and pooling.
    pub fn pooled(&self) -> Result<[usize; 2], AdcrnnError> {
        let mut out = [0; 2];
        for a in 0..2 {
            let conv = self.input[a] + 1;
            if conv <= self.conv_kernel[a] || conv - self.conv_kernel[a] < self.pool[a] {
                return Err(AdcrnnError::InvalidConfig(format!(
                    "input {:?} too small for kernel {:?} and pool {:?}",
                    self.input, self.conv_kernel, self.pool
                )));
            }
            out[a] = (conv - self.conv_kernel[a] - self.pool[a]) / self.pool[a] + 1;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), AdcrnnError> {
        let positive = [
            self.classes,
            self.conv_maps,
            self.dilated_maps,
            self.dilated_layers,
            self.dilation,
            self.linear_units,
            self.lstm_units,
            self.fcn_units,
        ];
        if positive.contains(&0) || self.lstm_dilations.is_empty() || self.input.contains(&0) {
            return Err(AdcrnnError::InvalidConfig("sizes must be positive".into()));
        }
        if self.classes < 2 {
            return Err(AdcrnnError::InvalidConfig("need at least two classes".into()));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(AdcrnnError::InvalidConfig(format!("keep probability {}", self.keep_prob)));
        }
        let [t, _] = self.pooled()?;
        let dmax = *self.lstm_dilations.iter().max().unwrap();
        if t < dmax {
            return Err(AdcrnnError::InvalidConfig(format!(
                "{t} pooled frames is shorter than lstm dilation {dmax}"
            )));
        }
        Ok(())
    }
}

/// Network parameters and the layer handles that read them.
#[derive(Clone, Debug)]
pub struct Adcrnn {
    pub config: AdcrnnConfig,
    pub store: ParamStore,
    conv: Conv,
    dilated: Vec<Conv>,
    /// Present only when the skip source and target channel counts differ.
    adapter: Option<Conv>,
    linear: Dense,
    bn: BatchNorm,
    lstm: BiDilatedLstm,
    attention: Attention,
    fcn: Dense,
    output: Dense,
}

/// Tape handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AdcrnnVars {
    /// FCN activations before dropout, `[B, fcn_units]`.
    pub features: Var,
    pub logits: Var,
    pub alpha: Var,
}

pub fn build_adcrnn(config: AdcrnnConfig, seed: u64) -> Result<Adcrnn, AdcrnnError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let c = &config;
    let conv = Conv::new(
        &mut store,
        "cnn",
        ConvSpec::conv2d(c.conv_kernel, [1, 1], c.input[2], c.conv_maps).padding(Padding::Valid),
        &mut rng,
    );
    let mut dilated = Vec::new();
    let mut cin = c.conv_maps;
    for i in 0..c.dilated_layers {
        dilated.push(Conv::new(
            &mut store,
            &format!("dilated_cnn{}", i + 1),
            ConvSpec::conv2d([3, 3], [1, 1], cin, c.dilated_maps).dilation([c.dilation, c.dilation]),
            &mut rng,
        ));
        cin = c.dilated_maps;
    }
    // the skip runs from the first dilated block into the last; both carry
    // `dilated_maps` channels unless there is only one block
    let skip_in = if c.dilated_layers > 1 { c.dilated_maps } else { c.conv_maps };
    let adapter = (skip_in != c.dilated_maps).then(|| {
        Conv::new(
            &mut store,
            "skip_adapter",
            ConvSpec::conv2d([1, 1], [1, 1], skip_in, c.dilated_maps),
            &mut rng,
        )
    });
    let [_, f] = c.pooled()?;
    let linear = Dense::new(&mut store, "linear", f * c.dilated_maps, c.linear_units, true, &mut rng);
    let bn = BatchNorm::new(&mut store, "batchnorm", c.linear_units);
    let lstm = BiDilatedLstm::new(&mut store, "bilstm", c.linear_units, c.lstm_units, &c.lstm_dilations, &mut rng);
    let attention = Attention::new(&mut store, "attention", 2 * c.lstm_units, &mut rng);
    let fcn = Dense::new(&mut store, "fcn", 2 * c.lstm_units, c.fcn_units, true, &mut rng);
    let output = Dense::new(&mut store, "output", c.fcn_units, c.classes, true, &mut rng);
    Ok(Adcrnn {
        config,
        store,
        conv,
        dilated,
        adapter,
        linear,
        bn,
        lstm,
        attention,
        fcn,
        output,
    })
}

impl Adcrnn {
    /// `x [B, frames, mels, channels]` through to logits.
    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, x: Var, ctx: &mut Ctx) -> Result<AdcrnnVars, AdcrnnError> {
        let c = &self.config;
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != c.input {
            return Err(AdcrnnError::FeatureShape {
                expected: c.input.to_vec(),
                found: shape,
            });
        }
        let b = shape[0];
        let h = self.conv.forward(tape, pv, x);
        let h = tape.relu(h);
        let mut h = tape.max_pool2d(h, c.pool, c.pool);
        let mut first = None;
        let last = self.dilated.len() - 1;
        for (i, conv) in self.dilated.iter().enumerate() {
            let src = h;
            h = conv.forward(tape, pv, h);
            if i == last {
                let skip = first.unwrap_or(src);
                let skip = match &self.adapter {
                    Some(a) => a.forward(tape, pv, skip),
                    None => skip,
                };
                h = tape.add(h, skip);
            }
            h = tape.relu(h);
            if i == 0 {
                first = Some(h);
            }
        }
        let [t, f] = c.pooled()?;
        let h = tape.reshape(h, &[b, t, f * c.dilated_maps]);
        let h = self.linear.forward(tape, pv, h);
        let h = self.bn.forward(tape, pv, &self.store, h, ctx);
        let h = self.lstm.forward(tape, pv, h)?;
        let (pooled, alpha) = self.attention.forward(tape, pv, h);
        let feats = self.fcn.forward(tape, pv, pooled);
        let feats = tape.relu(feats);
        let dropped = dropout(tape, feats, c.keep_prob, ctx);
        let logits = self.output.forward(tape, pv, dropped);
        Ok(AdcrnnVars {
            features: feats,
            logits,
            alpha,
        })
    }

    /// One row per graph node, for a batch of `batch` examples.
    pub fn describe(&self, batch: usize) -> Result<Vec<LayerRow>, AdcrnnError> {
        let c = &self.config;
        let mut rows = Vec::new();
        let mut shape = vec![batch, c.input[0], c.input[1], c.input[2]];
        let push = |rows: &mut Vec<LayerRow>, name: &str, layer: &Layer, shape: &mut Vec<usize>| {
            *shape = layer.out_shape(shape)?;
            rows.push(LayerRow {
                name: name.to_string(),
                kind: layer.kind(),
                kernel: layer.kernel_shape(),
                output: shape.clone(),
            });
            Ok::<_, NeuralError>(())
        };
        push(&mut rows, "CNN", &Layer::Conv(self.conv.clone()), &mut shape)?;
        push(&mut rows, "ReLU", &Layer::Relu, &mut shape)?;
        let pool = Layer::MaxPool2d {
            kernel: c.pool,
            stride: c.pool,
        };
        push(&mut rows, "Max-pooling", &pool, &mut shape)?;
        for (i, conv) in self.dilated.iter().enumerate() {
            push(&mut rows, &format!("Dilated CNN {}", i + 1), &Layer::Conv(conv.clone()), &mut shape)?;
            if let (true, Some(a)) = (i + 1 == self.dilated.len(), &self.adapter) {
                rows.push(LayerRow {
                    name: "Skip adapter".into(),
                    kind: LayerKind::Conv2d,
                    kernel: Some(a.kernel_shape()),
                    output: shape.clone(),
                });
            }
            push(&mut rows, &format!("ReLU {}", i + 1), &Layer::Relu, &mut shape)?;
        }
        let [t, f] = c.pooled()?;
        push(
            &mut rows,
            "Reshape",
            &Layer::Reshape {
                shape: vec![t, f * c.dilated_maps],
            },
            &mut shape,
        )?;
        push(&mut rows, "Linear", &Layer::Dense(self.linear.clone()), &mut shape)?;
        push(&mut rows, "Batchnorm", &Layer::BatchNorm(self.bn.clone()), &mut shape)?;
        shape = vec![batch, t, 2 * c.lstm_units];
        rows.push(LayerRow {
            name: "Bidirectional dilated LSTM".into(),
            kind: LayerKind::Bidilstm,
            kernel: Some(vec![c.linear_units, 4 * c.lstm_units]),
            output: shape.clone(),
        });
        rows.push(LayerRow {
            name: "Attention".into(),
            kind: LayerKind::Attention,
            kernel: Some(vec![2 * c.lstm_units]),
            output: vec![batch, 2 * c.lstm_units],
        });
        shape = vec![batch, 2 * c.lstm_units];
        push(&mut rows, "FCN", &Layer::Dense(self.fcn.clone()), &mut shape)?;
        push(&mut rows, "ReLU", &Layer::Relu, &mut shape)?;
        push(&mut rows, "Dropout", &Layer::Dropout { keep: c.keep_prob }, &mut shape)?;
        push(&mut rows, "Output", &Layer::Dense(self.output.clone()), &mut shape)?;
        Ok(rows)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// Softmax plus center loss on the FCN features.
    Lf1,
    /// Softmax alone.
    Lf2,
    /// Softmax plus center loss on the logits.
    Lf3,
    /// Softmax plus contrastive-center loss on the FCN features.
    Lf4,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [LossVariant::Lf1, LossVariant::Lf2, LossVariant::Lf3, LossVariant::Lf4];

    pub fn describe(self) -> &'static str {
        match self {
            LossVariant::Lf1 => "softmax loss + center loss on FCN-64 features",
            LossVariant::Lf2 => "softmax loss",
            LossVariant::Lf3 => "softmax loss + center loss on class logits",
            LossVariant::Lf4 => "softmax loss + contrastive-center loss",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LossVariant::Lf1 => "Lf1",
            LossVariant::Lf2 => "Lf2",
            LossVariant::Lf3 => "Lf3",
            LossVariant::Lf4 => "Lf4",
        };
        f.write_str(s)
    }
}

impl FromStr for LossVariant {
    type Err = AdcrnnError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lf1" => Ok(LossVariant::Lf1),
            "lf2" => Ok(LossVariant::Lf2),
            "lf3" => Ok(LossVariant::Lf3),
            "lf4" => Ok(LossVariant::Lf4),
            _ => Err(AdcrnnError::InvalidConfig(format!("unknown loss {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub epsilon: f64,
    /// Center update rate.
    pub alpha_c: f64,
    /// Contrastive-center denominator constant.
    pub delta: f64,
    /// Move centers along the loss gradient instead of the running-mean rule.
    pub learn_centers: bool,
}

impl LossConfig {
    pub fn new(variant: LossVariant) -> Self {
        LossConfig {
            variant,
            epsilon: 0.1,
            alpha_c: 0.5,
            delta: 1.0,
            learn_centers: false,
        }
    }

    pub fn validate(&self) -> Result<(), AdcrnnError> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(AdcrnnError::InvalidConfig(format!("epsilon {} outside [0, 1)", self.epsilon)));
        }
        if !(self.alpha_c >= 0.0 && self.delta > 0.0) {
            return Err(AdcrnnError::InvalidConfig("alpha_c must be >= 0 and delta > 0".into()));
        }
        Ok(())
    }

    /// Width of the vectors the centers live in, if the variant uses centers.
    pub fn center_dim(&self, model: &AdcrnnConfig) -> Option<usize> {
        match self.variant {
            LossVariant::Lf1 | LossVariant::Lf4 => Some(model.fcn_units),
            LossVariant::Lf3 => Some(model.classes),
            LossVariant::Lf2 => None,
        }
    }
}

/// `−Σ_n log softmax(z_n)[y_n]` over a `[B, E]` batch.
#[derive(Debug)]
struct SoftmaxCe {
    labels: Vec<usize>,
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

impl CustomOp for SoftmaxCe {
    fn name(&self) -> &str {
        "softmax_ce"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let z = inputs[0];
        let e = z.last_dim();
        let g = grad.item();
        let mut dz = Vec::with_capacity(z.numel());
        for (row, &y) in z.data().chunks(e).zip(&self.labels) {
            for (j, l) in log_softmax(row).into_iter().enumerate() {
                dz.push(g * (l.exp() - if j == y { 1.0 } else { 0.0 }));
            }
        }
        vec![Some(Tensor::new(z.shape().to_vec(), dz).unwrap())]
    }
}

pub fn softmax_loss_value(logits: &Tensor, labels: &[usize]) -> f64 {
    let e = logits.last_dim();
    logits
        .data()
        .chunks(e)
        .zip(labels)
        .map(|(row, &y)| -log_softmax(row)[y])
        .sum()
}

pub fn softmax_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Var {
    let value = softmax_loss_value(tape.value(logits), labels);
    tape.custom(
        Box::new(SoftmaxCe {
            labels: labels.to_vec(),
        }),
        &[logits],
        Tensor::scalar(value),
    )
}

/// `½ Σ_n ‖x_n − C_{y_n}‖²`; inputs are features `[B, F]` and centers `[E, F]`.
#[derive(Debug)]
struct CenterLoss {
    labels: Vec<usize>,
}

pub fn center_loss_value(x: &Tensor, labels: &[usize], centers: &Tensor) -> f64 {
    let f = x.last_dim();
    x.data()
        .chunks(f)
        .zip(labels)
        .map(|(row, &y)| {
            let c = &centers.data()[y * f..(y + 1) * f];
            row.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        })
        .sum::<f64>()
        / 2.0
}

impl CustomOp for CenterLoss {
    fn name(&self) -> &str {
        "center_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, c) = (inputs[0], inputs[1]);
        let f = x.last_dim();
        let g = grad.item();
        let mut dx = x.clone();
        let mut dc = Tensor::zeros(c.shape());
        for (n, &y) in self.labels.iter().enumerate() {
            for k in 0..f {
                let d = x.data()[n * f + k] - c.data()[y * f + k];
                dx.data_mut()[n * f + k] = g * d;
                dc.data_mut()[y * f + k] -= g * d;
            }
        }
        vec![Some(dx), Some(dc)]
    }
}

pub fn center_loss(tape: &mut Tape, x: Var, labels: &[usize], centers: Var) -> Var {
    let value = center_loss_value(tape.value(x), labels, tape.value(centers));
    tape.custom(
        Box::new(CenterLoss {
            labels: labels.to_vec(),
        }),
        &[x, centers],
        Tensor::scalar(value),
    )
}

/// `½ Σ_n ‖x_n − C_{y_n}‖² / (Σ_{j≠y_n} ‖x_n − C_j‖² + δ)`.
#[derive(Debug)]
struct ContrastiveCenter {
    labels: Vec<usize>,
    delta: f64,
}

fn sq_dists(row: &[f64], centers: &Tensor) -> Vec<f64> {
    centers
        .data()
        .chunks(row.len())
        .map(|c| row.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect()
}

pub fn contrastive_center_value(x: &Tensor, labels: &[usize], centers: &Tensor, delta: f64) -> f64 {
    let f = x.last_dim();
    x.data()
        .chunks(f)
        .zip(labels)
        .map(|(row, &y)| {
            let d = sq_dists(row, centers);
            let other: f64 = d.iter().enumerate().filter(|(j, _)| *j != y).map(|(_, v)| v).sum();
            0.5 * d[y] / (other + delta)
        })
        .sum()
}

impl CustomOp for ContrastiveCenter {
    fn name(&self) -> &str {
        "contrastive_center_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, c) = (inputs[0], inputs[1]);
        let f = x.last_dim();
        let e = c.shape()[0];
        let g = grad.item();
        let mut dx = Tensor::zeros(x.shape());
        let mut dc = Tensor::zeros(c.shape());
        for (n, &y) in self.labels.iter().enumerate() {
            let row = &x.data()[n * f..(n + 1) * f];
            let d = sq_dists(row, c);
            let a = d[y];
            let den = d.iter().enumerate().filter(|(j, _)| *j != y).map(|(_, v)| v).sum::<f64>() + self.delta;
            // L_n = a / (2 den): ∂/∂a = 1/(2 den), ∂/∂den = −a/(2 den²)
            let la = g / (2.0 * den);
            let ld = -g * a / (2.0 * den * den);
            for j in 0..e {
                let w = if j == y { la } else { ld };
                for k in 0..f {
                    let diff = row[k] - c.data()[j * f + k];
                    dx.data_mut()[n * f + k] += 2.0 * w * diff;
                    dc.data_mut()[j * f + k] -= 2.0 * w * diff;
                }
            }
        }
        vec![Some(dx), Some(dc)]
    }
}

pub fn contrastive_center_loss(tape: &mut Tape, x: Var, labels: &[usize], centers: Var, delta: f64) -> Var {
    let value = contrastive_center_value(tape.value(x), labels, tape.value(centers), delta);
    tape.custom(
        Box::new(ContrastiveCenter {
            labels: labels.to_vec(),
            delta,
        }),
        &[x, centers],
        Tensor::scalar(value),
    )
}

/// Total training loss for `variant`. `centers` may be `None` only for Lf2.
pub fn total_loss(
    tape: &mut Tape,
    cfg: &LossConfig,
    features: Var,
    logits: Var,
    labels: &[usize],
    centers: Option<Var>,
) -> Var {
    let sm = softmax_loss(tape, logits, labels);
    let aux = match (cfg.variant, centers) {
        (LossVariant::Lf2, _) => return sm,
        (LossVariant::Lf1, Some(c)) => center_loss(tape, features, labels, c),
        (LossVariant::Lf3, Some(c)) => center_loss(tape, logits, labels, c),
        (LossVariant::Lf4, Some(c)) => contrastive_center_loss(tape, features, labels, c, cfg.delta),
        (v, None) => panic!("{v} needs class centers"),
    };
    let aux = tape.scale(aux, cfg.epsilon);
    tape.add(aux, sm)
}

/// Running-mean center update; classes absent from the batch keep their center.
pub fn update_centroids(centers: &mut Tensor, x: &Tensor, labels: &[usize], alpha_c: f64) {
    let f = x.last_dim();
    let e = centers.shape()[0];
    let mut diff = vec![0.0; e * f];
    let mut count = vec![0usize; e];
    for (row, &y) in x.data().chunks(f).zip(labels) {
        count[y] += 1;
        for k in 0..f {
            diff[y * f + k] += centers.data()[y * f + k] - row[k];
        }
    }
    for j in 0..e {
        if count[j] == 0 {
            continue;
        }
        for k in 0..f {
            centers.data_mut()[j * f + k] -= alpha_c * diff[j * f + k] / (1 + count[j]) as f64;
        }
    }
}

/// Softmax probabilities and the arg-max class (lowest index on ties).
pub fn probabilities(logits: &[f64]) -> (usize, Vec<f64>) {
    let p: Vec<f64> = log_softmax(logits).into_iter().map(f64::exp).collect();
    let mut best = 0;
    for (j, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = j;
        }
    }
    (best, p)
}

/// One labelled feature tensor `[frames, mels, channels]`.
#[derive(Clone, Debug)]
pub struct Example {
    pub features: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl TrainConfig {
    pub fn new(loss: LossVariant, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size: 16,
            lr: 1e-4,
            seed,
            loss: LossConfig::new(loss),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Adcrnn,
    pub centers: Option<Tensor>,
    /// Mean per-example loss of every epoch.
    pub trace: Vec<f64>,
}

fn batch_tensor(examples: &[&Example]) -> Result<Tensor, AdcrnnError> {
    let items: Vec<Tensor> = examples.iter().map(|e| e.features.clone()).collect();
    Ok(Tensor::stack(&items)?)
}

fn check_examples(cfg: &AdcrnnConfig, data: &[Example]) -> Result<(), AdcrnnError> {
    for e in data {
        if e.features.shape() != cfg.input {
            return Err(AdcrnnError::FeatureShape {
                expected: cfg.input.to_vec(),
                found: e.features.shape().to_vec(),
            });
        }
        if e.label >= cfg.classes {
            return Err(AdcrnnError::LabelRange {
                label: e.label,
                classes: cfg.classes,
            });
        }
    }
    Ok(())
}

/// Train from scratch with seeded shuffling, dropout and initialisation.
///
/// `on_epoch` receives the epoch index and mean loss after every epoch.
pub fn train(
    model_cfg: &AdcrnnConfig,
    data: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Trained, AdcrnnError> {
    cfg.loss.validate()?;
    if data.is_empty() {
        return Err(AdcrnnError::EmptyFold);
    }
    check_examples(model_cfg, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = build_adcrnn(model_cfg.clone(), rng.gen())?;
    let mut centers = cfg
        .loss
        .center_dim(model_cfg)
        .map(|f| Tensor::zeros(&[model_cfg.classes, f]));
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
            let x = batch_tensor(&batch)?;
            let mut tape = Tape::new();
            let pv = model.store.bind(&mut tape);
            let xv = tape.constant(x);
            let cv = centers.as_ref().map(|c| {
                if cfg.loss.learn_centers {
                    tape.leaf(c.clone())
                } else {
                    tape.constant(c.clone())
                }
            });
            let mut ctx = Ctx::train(&mut rng);
            let out = model.forward(&mut tape, &pv, xv, &mut ctx)?;
            let loss = total_loss(&mut tape, &cfg.loss, out.features, out.logits, &labels, cv);
            let grads = tape.backward(loss);
            ctx.apply_updates(&mut model.store);
            model.store.zero_grad();
            model.store.accumulate(&grads, &pv);
            opt.step(&mut model.store);
            total += tape.value(loss).item();
            if let (Some(c), Some(v)) = (centers.as_mut(), cv) {
                if cfg.loss.learn_centers {
                    let g = grads.get_or_zeros(v, c);
                    let step = g.scale(-cfg.loss.alpha_c);
                    c.add_assign(&step);
                } else {
                    let fv = if cfg.loss.variant == LossVariant::Lf3 {
                        out.logits
                    } else {
                        out.features
                    };
                    update_centroids(c, tape.value(fv), &labels, cfg.loss.alpha_c);
                }
            }
        }
        let mean = total / data.len() as f64;
        on_epoch(epoch, mean);
        trace.push(mean);
    }
    Ok(Trained { model, centers, trace })
}

/// Eval-mode class decisions and probabilities for a list of feature tensors.
pub fn predict_many(model: &Adcrnn, xs: &[Tensor]) -> Result<Vec<(usize, Vec<f64>)>, AdcrnnError> {
    let mut out = Vec::with_capacity(xs.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in xs.chunks(16) {
        for x in chunk {
            if x.shape() != model.config.input {
                return Err(AdcrnnError::FeatureShape {
                    expected: model.config.input.to_vec(),
                    found: x.shape().to_vec(),
                });
            }
        }
        let mut tape = Tape::new();
        let pv = model.store.bind_frozen(&mut tape);
        let xv = tape.constant(Tensor::stack(chunk)?);
        let mut ctx = Ctx::eval(&mut rng);
        let o = model.forward(&mut tape, &pv, xv, &mut ctx)?;
        let logits = tape.value(o.logits);
        out.extend(logits.data().chunks(model.config.classes).map(probabilities));
    }
    Ok(out)
}

pub fn predict(model: &Adcrnn, x: &Tensor) -> Result<(usize, Vec<f64>), AdcrnnError> {
    Ok(predict_many(model, std::slice::from_ref(x))?.pop().unwrap())
}

#[derive(Serialize, Deserialize)]
struct SavedModel {
    config: AdcrnnConfig,
    train: Option<TrainConfig>,
}

const CENTERS_FILE: &str = "centers.tensor";

pub fn save_model(
    dir: impl AsRef<Path>,
    model: &Adcrnn,
    centers: Option<&Tensor>,
    seed: u64,
    train: Option<&TrainConfig>,
) -> Result<(), AdcrnnError> {
    let dir = dir.as_ref();
    let json = serde_json::to_value(SavedModel {
        config: model.config.clone(),
        train: train.cloned(),
    })?;
    checkpoint::save(dir, &model.store, json, seed, model.describe(1)?)?;
    if let Some(c) = centers {
        ser_neural::tensor_write(c, dir.join(CENTERS_FILE))?;
    }
    Ok(())
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<(Adcrnn, Option<Tensor>), AdcrnnError> {
    let dir = dir.as_ref();
    let manifest = checkpoint::read_manifest(dir)?;
    let saved: SavedModel = serde_json::from_value(manifest.model)?;
    let mut model = build_adcrnn(saved.config, manifest.seed)?;
    checkpoint::load_into(dir, &mut model.store)?;
    let centers_path = dir.join(CENTERS_FILE);
    let centers = if centers_path.exists() {
        Some(ser_neural::tensor_read(centers_path)?)
    } else {
        None
    };
    Ok((model, centers))
}
