//! WaveGAN and SpecGAN graphs, the WGAN-GP objective and a per-class
//! adversarial training loop.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ser_neural::checkpoint;
use ser_neural::{
    Adam, Conv, ConvSpec, Ctx, Dense, Layer, LayerRow, NeuralError, ParamStore, Sequential, Tape, Tensor,
};
use thiserror::Error;

use crate::audio::{self, AudioError, EmotionLabel, UtteranceRecord, Waveform, CANONICAL_SR};
use crate::augment::{AugmentParams, BalancePlan};
use crate::spectral::{self, SpecganNorm, SpectralError, SPECGAN_SIZE, SPECGAN_SLICE};

pub const LATENT_DIM: usize = 100;
pub const WAVE_KERNEL: usize = 25;
pub const WAVE_STRIDE: usize = 4;
pub const SPEC_KERNEL: usize = 5;
pub const SPEC_STRIDE: usize = 2;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum GanError {
    #[error("invalid GAN specification: {0}")]
    InvalidSpec(String),
    #[error("batch size mismatch: real {real}, fake {fake}, mixing weights {mix}")]
    BatchMismatch { real: usize, fake: usize, mix: usize },
    #[error("no training audio for this class")]
    EmptyClass,
    #[error("SpecGAN needs a spectrogram normalisation")]
    MissingNorm,
    #[error("no generator for class {0}")]
    MissingGenerator(EmotionLabel),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanFamily {
    Wavegan,
    Specgan,
}

impl FromStr for GanFamily {
    type Err = GanError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wave" | "wavegan" => Ok(GanFamily::Wavegan),
            "spec" | "specgan" => Ok(GanFamily::Specgan),
            _ => Err(GanError::InvalidSpec(format!("unknown family {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GanSpec {
    pub family: GanFamily,
    /// Model size `D`: channel multiplier of every layer.
    pub model_size: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub phase_shuffle_n: usize,
}

impl GanSpec {
    pub fn wavegan(model_size: usize) -> Self {
        GanSpec {
            family: GanFamily::Wavegan,
            model_size,
            channels: 1,
            latent_dim: LATENT_DIM,
            phase_shuffle_n: 2,
        }
    }

    pub fn specgan(model_size: usize) -> Self {
        GanSpec {
            family: GanFamily::Specgan,
            phase_shuffle_n: 0,
            ..Self::wavegan(model_size)
        }
    }

    pub fn validate(&self) -> Result<(), GanError> {
        if self.model_size == 0 || self.channels == 0 {
            return Err(GanError::InvalidSpec("model size and channels must be positive".into()));
        }
        if self.latent_dim != LATENT_DIM {
            return Err(GanError::InvalidSpec(format!("latent size must be {LATENT_DIM}")));
        }
        if self.family == GanFamily::Specgan && self.phase_shuffle_n != 0 {
            return Err(GanError::InvalidSpec("SpecGAN has no phase shuffle".into()));
        }
        Ok(())
    }

    /// Per-example generator output shape.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self.family {
            GanFamily::Wavegan => vec![SPECGAN_SLICE, self.channels],
            GanFamily::Specgan => vec![SPECGAN_SIZE, SPECGAN_SIZE, self.channels],
        }
    }
}

/// Generator and discriminator with their parameters.
#[derive(Clone, Debug)]
pub struct Gan {
    pub spec: GanSpec,
    pub generator: Sequential,
    pub discriminator: Sequential,
    pub g_params: ParamStore,
    pub d_params: ParamStore,
    pub seed: u64,
}

fn wave_conv(store: &mut ParamStore, name: &str, cin: usize, cout: usize, transposed: bool, rng: &mut ChaCha8Rng) -> Layer {
    let mut spec = ConvSpec::conv1d(WAVE_KERNEL, WAVE_STRIDE, cin, cout);
    if transposed {
        spec = spec.transposed();
    }
    Layer::Conv(Conv::new(store, name, spec, rng))
}

fn spec_conv(store: &mut ParamStore, name: &str, cin: usize, cout: usize, transposed: bool, rng: &mut ChaCha8Rng) -> Layer {
    let mut spec = ConvSpec::conv2d([SPEC_KERNEL; 2], [SPEC_STRIDE; 2], cin, cout);
    if transposed {
        spec = spec.transposed();
    }
    Layer::Conv(Conv::new(store, name, spec, rng))
}

/// Build either family; parameters are drawn from `seed`.
pub fn build_gan(spec: GanSpec, seed: u64) -> Result<Gan, GanError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.model_size;
    let c = spec.channels;
    let wave = spec.family == GanFamily::Wavegan;
    let (conv_name, stride_tag) = if wave { ("Conv1D", "S=4") } else { ("Conv2D", "S=2") };
    let conv = if wave { wave_conv } else { spec_conv };
    // channel ladder shared by both networks, from the sample side inwards
    let ladder = [c, d, 2 * d, 4 * d, 8 * d, 16 * d];

    let mut g_params = ParamStore::new();
    let mut g = Sequential::new();
    g.push(
        "Dense",
        Layer::Dense(Dense::new(&mut g_params, "generator/dense", spec.latent_dim, 256 * d, true, &mut rng)),
    );
    let seed_shape = if wave { vec![16, 16 * d] } else { vec![4, 4, 16 * d] };
    g.push("Reshape", Layer::Reshape { shape: seed_shape });
    for i in 0..5 {
        let (cin, cout) = (ladder[5 - i], ladder[4 - i]);
        g.push(format!("ReLU {}", i + 1), Layer::Relu);
        g.push(
            format!("Transpose {conv_name} {} ({stride_tag})", i + 1),
            conv(&mut g_params, &format!("generator/tconv{}", i + 1), cin, cout, true, &mut rng),
        );
    }
    g.push("Tanh", Layer::Tanh);

    let mut d_params = ParamStore::new();
    let mut disc = Sequential::new();
    for i in 0..5 {
        let (cin, cout) = (ladder[i], ladder[i + 1]);
        disc.push(
            format!("{conv_name} {} ({stride_tag})", i + 1),
            conv(&mut d_params, &format!("discriminator/conv{}", i + 1), cin, cout, false, &mut rng),
        );
        disc.push(
            format!("LeakyReLU {} (a={LEAKY_SLOPE})", i + 1),
            Layer::LeakyRelu { alpha: LEAKY_SLOPE },
        );
        if wave && i < 4 {
            disc.push(
                format!("Phase Shuffle {} (n={})", i + 1, spec.phase_shuffle_n),
                Layer::PhaseShuffle {
                    n: spec.phase_shuffle_n,
                },
            );
        }
    }
    disc.push("Reshape", Layer::Reshape { shape: vec![256 * d] });
    disc.push(
        "Dense",
        Layer::Dense(Dense::new(&mut d_params, "discriminator/dense", 256 * d, 1, true, &mut rng)),
    );
    Ok(Gan {
        spec,
        generator: g,
        discriminator: disc,
        g_params,
        d_params,
        seed,
    })
}

pub fn build_wavegan(model_size: usize, seed: u64) -> Result<Gan, GanError> {
    build_gan(GanSpec::wavegan(model_size), seed)
}

pub fn build_specgan(model_size: usize, seed: u64) -> Result<Gan, GanError> {
    build_gan(GanSpec::specgan(model_size), seed)
}

impl Gan {
    pub fn generator_rows(&self, batch: usize) -> Result<Vec<LayerRow>, GanError> {
        Ok(self.generator.describe(&[batch, self.spec.latent_dim])?)
    }

    pub fn discriminator_rows(&self, batch: usize) -> Result<Vec<LayerRow>, GanError> {
        let mut shape = vec![batch];
        shape.extend(self.spec.sample_shape());
        Ok(self.discriminator.describe(&shape)?)
    }

    /// Generator forward pass with frozen parameters: `z [B, 100]` → samples.
    pub fn generate(&self, z: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let pv = self.g_params.bind_frozen(&mut tape);
        let zv = tape.constant(z.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Ctx::eval(&mut rng);
        let out = self.generator.forward(&mut tape, &pv, &self.g_params, zv, &mut ctx, None);
        tape.value(out).clone()
    }
}

/// Values of the WGAN-GP objective on one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GpLosses {
    pub loss_d: f64,
    pub loss_g: f64,
    /// `mean D(real) − mean D(fake)`, the critic's Wasserstein estimate.
    pub wasserstein: f64,
    pub penalty: f64,
    pub grad_norms: Vec<f64>,
}

/// `u·real + (1 − u)·fake`, one `u` per example.
pub fn interpolate(real: &Tensor, fake: &Tensor, u: &[f64]) -> Result<Tensor, GanError> {
    let b = real.shape()[0];
    if fake.shape() != real.shape() || u.len() != b {
        return Err(GanError::BatchMismatch {
            real: b,
            fake: fake.shape()[0],
            mix: u.len(),
        });
    }
    let per = real.numel() / b.max(1);
    let mut out = real.clone();
    for (i, (o, f)) in out.data_mut().iter_mut().zip(fake.data()).enumerate() {
        let w = u[i / per];
        *o = w * *o + (1.0 - w) * f;
    }
    Ok(out)
}

/// Critic outputs `[B]` for a batch with fixed phase shifts.
pub fn critic_scores(critic: &Sequential, store: &ParamStore, x: &Tensor, shuffles: &[Vec<isize>]) -> Vec<f64> {
    let mut tape = Tape::new();
    let pv = store.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = Ctx::train(&mut rng);
    let out = critic.forward(&mut tape, &pv, store, xv, &mut ctx, Some(shuffles));
    tape.value(out).data().to_vec()
}

/// Per-example gradients of the critic output with respect to its input.
pub fn critic_input_gradients(critic: &Sequential, store: &ParamStore, x: &Tensor, shuffles: &[Vec<isize>]) -> Tensor {
    let mut tape = Tape::new();
    let pv = store.bind_frozen(&mut tape);
    let xv = tape.leaf(x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = Ctx::train(&mut rng);
    let out = critic.forward(&mut tape, &pv, store, xv, &mut ctx, Some(shuffles));
    // outputs of different examples are independent, so one backward pass suffices
    let total = tape.sum(out);
    tape.backward(total).get_or_zeros(xv, x)
}

fn per_example_norms(g: &Tensor) -> Vec<f64> {
    let b = g.shape()[0];
    let per = g.numel() / b.max(1);
    g.data().chunks(per).map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

/// Shifts for the three critic passes of one step (real, fake, interpolates).
#[derive(Clone, Debug)]
pub struct CriticShuffles {
    pub real: Vec<Vec<isize>>,
    pub fake: Vec<Vec<isize>>,
    pub mixed: Vec<Vec<isize>>,
}

impl CriticShuffles {
    pub fn draw(critic: &Sequential, batch: usize, rng: &mut dyn RngCore) -> Self {
        CriticShuffles {
            real: critic.draw_shuffles(batch, rng),
            fake: critic.draw_shuffles(batch, rng),
            mixed: critic.draw_shuffles(batch, rng),
        }
    }
}

/// Evaluate the WGAN-GP losses without touching gradients.
pub fn wgan_gp_losses(
    critic: &Sequential,
    store: &ParamStore,
    real: &Tensor,
    fake: &Tensor,
    u: &[f64],
    lambda: f64,
    shuffles: &CriticShuffles,
) -> Result<GpLosses, GanError> {
    let mixed = interpolate(real, fake, u)?;
    let dr = critic_scores(critic, store, real, &shuffles.real);
    let df = critic_scores(critic, store, fake, &shuffles.fake);
    let norms = per_example_norms(&critic_input_gradients(critic, store, &mixed, &shuffles.mixed));
    Ok(assemble(&dr, &df, norms, lambda))
}

fn assemble(dr: &[f64], df: &[f64], grad_norms: Vec<f64>, lambda: f64) -> GpLosses {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let penalty = grad_norms.iter().map(|n| (n - 1.0).powi(2)).sum::<f64>() / grad_norms.len() as f64;
    let wasserstein = mean(dr) - mean(df);
    GpLosses {
        loss_d: -wasserstein + lambda * penalty,
        loss_g: -mean(df),
        wasserstein,
        penalty,
        grad_norms,
    }
}

/// Accumulate the critic-loss gradient into `store` and return the loss values.
///
/// The penalty's parameter gradient is taken exactly: with `g_b = ∇ₓD(x̂_b)` and
/// `v_b = 2(‖g_b‖ − 1) g_b / ‖g_b‖` held fixed, `d/dθ Σ_b v_b·g_b(θ)` equals the
/// penalty gradient, and `v_b·g_b` is the directional derivative of `D` at
/// `x̂_b` along `v_b`, which the tape records by forward-mode propagation.
pub fn critic_gradients(
    critic: &Sequential,
    store: &mut ParamStore,
    real: &Tensor,
    fake: &Tensor,
    u: &[f64],
    lambda: f64,
    shuffles: &CriticShuffles,
) -> Result<GpLosses, GanError> {
    let mixed = interpolate(real, fake, u)?;
    let b = real.shape()[0];
    let g = critic_input_gradients(critic, store, &mixed, &shuffles.mixed);
    let norms = per_example_norms(&g);
    let per = g.numel() / b.max(1);
    let mut v = g.clone();
    for (chunk, n) in v.data_mut().chunks_mut(per).zip(&norms) {
        let s = if *n > 0.0 { 2.0 * (n - 1.0) / n } else { 0.0 };
        chunk.iter_mut().for_each(|x| *x *= s);
    }

    let mut tape = Tape::new();
    let pv = store.bind(&mut tape);
    let xr = tape.constant(real.clone());
    let xf = tape.constant(fake.clone());
    let xm = tape.constant(mixed);
    let vd = tape.constant(v);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = Ctx::train(&mut rng);
    let dr = critic.forward(&mut tape, &pv, store, xr, &mut ctx, Some(&shuffles.real));
    let df = critic.forward(&mut tape, &pv, store, xf, &mut ctx, Some(&shuffles.fake));
    let (_, tangent) = critic.forward_tangent(&mut tape, &pv, xm, vd, &shuffles.mixed)?;
    let mr = tape.mean(dr);
    let mf = tape.mean(df);
    let w = tape.sub(mf, mr);
    let t = tape.sum(tangent);
    let t = tape.scale(t, lambda / b as f64);
    let surrogate = tape.add(w, t);
    let grads = tape.backward(surrogate);
    store.accumulate(&grads, &pv);
    let dr_v = tape.value(dr).data().to_vec();
    let df_v = tape.value(df).data().to_vec();
    Ok(assemble(&dr_v, &df_v, norms, lambda))
}

/// Accumulate `∂(−mean D(G(z)))/∂θ_G` into the generator store; returns the loss.
pub fn generator_gradients(gan: &mut Gan, z: &Tensor, rng: &mut dyn RngCore) -> f64 {
    let b = z.shape()[0];
    let mut tape = Tape::new();
    let gpv = gan.g_params.bind(&mut tape);
    let dpv = gan.d_params.bind_frozen(&mut tape);
    let zv = tape.constant(z.clone());
    let shuffles = gan.discriminator.draw_shuffles(b, rng);
    let mut ctx = Ctx::train(rng);
    let fake = gan.generator.forward(&mut tape, &gpv, &gan.g_params, zv, &mut ctx, None);
    let score = gan
        .discriminator
        .forward(&mut tape, &dpv, &gan.d_params, fake, &mut ctx, Some(&shuffles));
    let m = tape.mean(score);
    let loss = tape.scale(m, -1.0);
    let grads = tape.backward(loss);
    gan.g_params.accumulate(&grads, &gpv);
    tape.value(loss).item()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub n_critic: usize,
    pub lambda: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        GanTrainConfig {
            steps: 2000,
            batch_size: 16,
            n_critic: 5,
            lambda: 10.0,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub wasserstein: f64,
    pub penalty: f64,
}

/// A random 16384-sample crop, zero-padded when the source is shorter.
pub fn random_slice<R: Rng + ?Sized>(x: &[f64], rng: &mut R) -> Vec<f64> {
    if x.len() > SPECGAN_SLICE {
        let start = rng.gen_range(0..=x.len() - SPECGAN_SLICE);
        x[start..start + SPECGAN_SLICE].to_vec()
    } else {
        let mut s = x.to_vec();
        s.resize(SPECGAN_SLICE, 0.0);
        s
    }
}

/// Real training examples for one family, `[B, ...sample_shape]`.
fn real_batch(
    spec: &GanSpec,
    audio: &[Vec<f64>],
    norm: Option<&SpecganNorm>,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, GanError> {
    let mut data = Vec::new();
    for _ in 0..batch {
        let src = &audio[rng.gen_range(0..audio.len())];
        let slice = random_slice(src, rng);
        match spec.family {
            GanFamily::Wavegan => data.extend(slice),
            GanFamily::Specgan => {
                let img = spectral::specgan_forward(&slice, norm.ok_or(GanError::MissingNorm)?)?;
                data.extend_from_slice(img.data());
            }
        }
    }
    let mut shape = vec![batch];
    shape.extend(spec.sample_shape());
    Ok(Tensor::new(shape, data)?)
}

pub fn latent_batch<R: Rng + ?Sized>(batch: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(&[batch, LATENT_DIM], -1.0, 1.0, rng)
}

/// Trained generator state plus its loss trace.
pub struct TrainedGan {
    pub gan: Gan,
    pub norm: Option<SpecganNorm>,
    pub trace: Vec<StepRecord>,
}

/// Alternate `n_critic` critic updates with one generator update.
///
/// `audio` holds the class's utterances at the canonical rate. `progress` is
/// called after every step and may stop training early by returning `false`.
pub fn train_gan(
    spec: GanSpec,
    audio: &[Vec<f64>],
    cfg: &GanTrainConfig,
    mut progress: impl FnMut(&StepRecord) -> bool,
) -> Result<TrainedGan, GanError> {
    if audio.is_empty() || audio.iter().all(|a| a.is_empty()) {
        return Err(GanError::EmptyClass);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gan = build_gan(spec, rng.gen())?;
    let norm = match spec.family {
        GanFamily::Specgan => {
            let slices: Vec<Vec<f64>> = audio.iter().map(|a| random_slice(a, &mut rng)).collect();
            Some(SpecganNorm::fit(&slices)?)
        }
        GanFamily::Wavegan => None,
    };
    let mut d_opt = Adam::with_betas(cfg.lr, cfg.beta1, cfg.beta2);
    let mut g_opt = Adam::with_betas(cfg.lr, cfg.beta1, cfg.beta2);
    let b = cfg.batch_size;
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut last = None;
        for _ in 0..cfg.n_critic {
            let real = real_batch(&spec, audio, norm.as_ref(), b, &mut rng)?;
            let fake = gan.generate(&latent_batch(b, &mut rng));
            let u: Vec<f64> = (0..b).map(|_| rng.gen::<f64>()).collect();
            let shuffles = CriticShuffles::draw(&gan.discriminator, b, &mut rng);
            gan.d_params.zero_grad();
            let l = critic_gradients(&gan.discriminator, &mut gan.d_params, &real, &fake, &u, cfg.lambda, &shuffles)?;
            d_opt.step(&mut gan.d_params);
            last = Some(l);
        }
        gan.g_params.zero_grad();
        let z = latent_batch(b, &mut rng);
        let loss_g = generator_gradients(&mut gan, &z, &mut rng);
        g_opt.step(&mut gan.g_params);
        let l = last.expect("n_critic must be positive");
        let rec = StepRecord {
            step,
            loss_d: l.loss_d,
            loss_g,
            wasserstein: l.wasserstein,
            penalty: l.penalty,
        };
        let keep_going = progress(&rec);
        trace.push(rec);
        if !keep_going {
            break;
        }
    }
    Ok(TrainedGan { gan, norm, trace })
}

/// Draw `count` waveforms of 16384 samples; identical for identical seeds.
pub fn generate_samples(gan: &Gan, norm: Option<&SpecganNorm>, count: usize, seed: u64) -> Result<Vec<Vec<f64>>, GanError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let b = (count - out.len()).min(16);
        let samples = gan.generate(&latent_batch(b, &mut rng));
        let per = samples.numel() / b;
        for chunk in samples.data().chunks(per) {
            out.push(match gan.spec.family {
                GanFamily::Wavegan => chunk.iter().step_by(gan.spec.channels).copied().collect(),
                GanFamily::Specgan => {
                    let img: Vec<f64> = chunk.iter().step_by(gan.spec.channels).copied().collect();
                    let img = Tensor::new(vec![SPECGAN_SIZE, SPECGAN_SIZE], img)?;
                    spectral::specgan_inverse(&img, norm.ok_or(GanError::MissingNorm)?)?
                }
            });
        }
    }
    Ok(out)
}

const NORM_FILE: &str = "specgan_norm.tensor";

#[derive(Serialize, Deserialize)]
struct GanManifestModel {
    spec: GanSpec,
    label: Option<EmotionLabel>,
    train: Option<GanTrainConfig>,
}

/// Save the generator (and critic) under `dir/generator` and `dir/discriminator`.
pub fn save_gan(
    dir: impl AsRef<Path>,
    gan: &Gan,
    norm: Option<&SpecganNorm>,
    label: Option<EmotionLabel>,
    train: Option<&GanTrainConfig>,
) -> Result<(), GanError> {
    let dir = dir.as_ref();
    let model = serde_json::to_value(GanManifestModel {
        spec: gan.spec,
        label,
        train: train.cloned(),
    })?;
    checkpoint::save(dir.join("generator"), &gan.g_params, model.clone(), gan.seed, gan.generator_rows(1)?)?;
    checkpoint::save(
        dir.join("discriminator"),
        &gan.d_params,
        model,
        gan.seed,
        gan.discriminator_rows(1)?,
    )?;
    if let Some(n) = norm {
        audio::tensor_write(&n.to_tensor(), dir.join(NORM_FILE))?;
    }
    Ok(())
}

pub struct LoadedGan {
    pub gan: Gan,
    pub norm: Option<SpecganNorm>,
    pub label: Option<EmotionLabel>,
}

pub fn load_gan(dir: impl AsRef<Path>) -> Result<LoadedGan, GanError> {
    let dir = dir.as_ref();
    let manifest = checkpoint::read_manifest(dir.join("generator"))?;
    let model: GanManifestModel = serde_json::from_value(manifest.model)?;
    let mut gan = build_gan(model.spec, manifest.seed)?;
    checkpoint::load_into(dir.join("generator"), &mut gan.g_params)?;
    if dir.join("discriminator").exists() {
        checkpoint::load_into(dir.join("discriminator"), &mut gan.d_params)?;
    }
    let norm = match model.spec.family {
        GanFamily::Specgan => Some(SpecganNorm::from_tensor(&audio::tensor_read(dir.join(NORM_FILE))?)?),
        GanFamily::Wavegan => None,
    };
    Ok(LoadedGan {
        gan,
        norm,
        label: model.label,
    })
}

/// Per-class generators used to execute a GAN balance plan.
pub type Generators = BTreeMap<EmotionLabel, (Gan, Option<SpecganNorm>)>;

/// Synthesise the waveform of every generated plan item, keyed by output id.
pub fn synthesize_plan(plan: &BalancePlan, generators: &Generators) -> Result<Vec<(String, EmotionLabel, Waveform)>, GanError> {
    let mut out = Vec::new();
    for item in &plan.items {
        let AugmentParams::Generated { seed } = item.params else {
            continue;
        };
        let (gan, norm) = generators.get(&item.label).ok_or(GanError::MissingGenerator(item.label))?;
        let mut s = generate_samples(gan, norm.as_ref(), 1, seed)?;
        out.push((
            item.output_id.clone(),
            item.label,
            Waveform {
                samples: s.pop().unwrap(),
                sample_rate: CANONICAL_SR,
            },
        ));
    }
    Ok(out)
}

/// Write generated plan items as WAVs and return their catalog records.
pub fn execute_gan_plan(
    plan: &BalancePlan,
    catalog: &[UtteranceRecord],
    generators: &Generators,
    out_dir: &Path,
) -> Result<Vec<UtteranceRecord>, GanError> {
    let mut records = Vec::new();
    for (id, label, wave) in synthesize_plan(plan, generators)? {
        let item = plan.items.iter().find(|i| i.output_id == id).unwrap();
        let speaker = catalog
            .iter()
            .find(|r| r.id == item.source_id)
            .map(|r| r.speaker.clone())
            .unwrap_or_default();
        let path = out_dir.join(format!("{id}.wav"));
        audio::write_wav(&wave, &path)?;
        records.push(UtteranceRecord {
            id,
            speaker,
            label,
            path,
            provenance: item.method.provenance(),
        });
    }
    Ok(records)
}
