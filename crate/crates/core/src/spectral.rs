//! STFT/ISTFT, mel filterbanks, 3D log-mel features, SpecGAN spectrogram
//! transforms and Griffin-Lim phase reconstruction.

use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use ser_neural::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("input of {len} samples is shorter than the {needed}-sample minimum")]
    TooShort { len: usize, needed: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("window/hop pair leaves samples with zero overlap-add weight")]
    NotInvertible,
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StftConfig {
    pub window: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub sample_rate: u32,
}

impl StftConfig {
    /// 25 ms windows, 10 ms hop, 512-point FFT at 16 kHz.
    pub fn features() -> Self {
        StftConfig {
            window: 400,
            hop: 160,
            fft_size: 512,
            sample_rate: 16_000,
        }
    }

    /// 16 ms windows, 8 ms hop at 16 kHz; a 256-point FFT so that 128 bins remain
    /// after dropping Nyquist.
    pub fn specgan() -> Self {
        StftConfig {
            window: 256,
            hop: 128,
            fft_size: 256,
            sample_rate: 16_000,
        }
    }

    pub fn from_ms(window_ms: f64, hop_ms: f64, fft_size: usize, sample_rate: u32) -> Result<Self, SpectralError> {
        let to_samples = |ms: f64| (ms * sample_rate as f64 / 1000.0).round() as usize;
        let cfg = StftConfig {
            window: to_samples(window_ms),
            hop: to_samples(hop_ms),
            fft_size,
            sample_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SpectralError> {
        if self.window == 0 || self.hop == 0 || self.sample_rate == 0 {
            return Err(SpectralError::InvalidConfig("window, hop and rate must be positive".into()));
        }
        if self.fft_size < self.window {
            return Err(SpectralError::InvalidConfig(format!(
                "fft size {} smaller than window {}",
                self.fft_size, self.window
            )));
        }
        if self.hop > self.window {
            return Err(SpectralError::InvalidConfig("hop longer than window".into()));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frames_for(&self, len: usize) -> usize {
        if len < self.window {
            0
        } else {
            (len - self.window) / self.hop + 1
        }
    }

    /// Samples spanned by `frames` frames.
    pub fn span(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.window
        }
    }
}

/// One-sided complex spectrogram, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex<f64>>,
    pub config: StftConfig,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[Complex<f64>] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

/// Planned forward/inverse FFTs of one size.
struct Planned {
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Planned {
    fn new(n: usize) -> Self {
        let mut p = FftPlanner::new();
        Planned {
            fwd: p.plan_fft_forward(n),
            inv: p.plan_fft_inverse(n),
        }
    }
}

/// Frame, window and transform; frame `t` covers `[t·hop, t·hop + window)`, no centring.
pub fn stft(x: &[f64], cfg: &StftConfig) -> Result<Spectrogram, SpectralError> {
    cfg.validate()?;
    if x.len() < cfg.window {
        return Err(SpectralError::TooShort {
            len: x.len(),
            needed: cfg.window,
        });
    }
    let win = hann(cfg.window);
    let plan = Planned::new(cfg.fft_size);
    let frames = cfg.frames_for(x.len());
    let bins = cfg.bins();
    let mut data = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    for t in 0..frames {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, (b, w)) in buf.iter_mut().zip(&win).enumerate() {
            b.re = x[t * cfg.hop + i] * w;
        }
        plan.fwd.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrogram {
        frames,
        bins,
        data,
        config: *cfg,
    })
}

/// Least-squares inverse: windowed overlap-add divided by the summed squared window.
///
/// Returns `(frames - 1)·hop + window` samples. Samples not covered by any
/// non-zero window value come back as zero.
pub fn istft(s: &Spectrogram) -> Result<Vec<f64>, SpectralError> {
    let cfg = &s.config;
    cfg.validate()?;
    let win = hann(cfg.window);
    // every residue class modulo hop must receive positive weight
    for r in 0..cfg.hop {
        let cover: f64 = (r..cfg.window).step_by(cfg.hop).map(|i| win[i] * win[i]).sum();
        if cover <= 1e-12 {
            return Err(SpectralError::NotInvertible);
        }
    }
    let len = cfg.span(s.frames);
    let mut out = vec![0.0; len];
    let mut norm = vec![0.0; len];
    let plan = Planned::new(cfg.fft_size);
    let n = cfg.fft_size;
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..s.frames {
        let f = s.frame(t);
        buf[..s.bins].copy_from_slice(f);
        buf[0].im = 0.0;
        if n % 2 == 0 {
            buf[n / 2].im = 0.0;
        }
        for k in 1..n.div_ceil(2) {
            buf[n - k] = f[k].conj();
        }
        plan.inv.process(&mut buf);
        for i in 0..cfg.window {
            let at = t * cfg.hop + i;
            out[at] += win[i] * buf[i].re / n as f64;
            norm[at] += win[i] * win[i];
        }
    }
    for (o, w) in out.iter_mut().zip(&norm) {
        *o = if *w > 1e-12 { *o / w } else { 0.0 };
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterSpacing {
    /// HTK mel scale.
    Mel,
    /// Filter edges evenly spaced in Hz.
    Linear,
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filterbank, `n_filters × (fft_size/2 + 1)`, row-major.
///
/// Filter `i` rises from edge `i` to a peak at edge `i + 1` and falls to edge
/// `i + 2`, where the `n_filters + 2` edges are evenly spaced on the chosen scale.
pub fn mel_filterbank(
    n_filters: usize,
    fmin: f64,
    fmax: f64,
    fft_size: usize,
    sample_rate: u32,
    spacing: FilterSpacing,
) -> Result<Tensor, SpectralError> {
    if n_filters == 0 || !(0.0..fmax).contains(&fmin) || fmax > sample_rate as f64 / 2.0 {
        return Err(SpectralError::InvalidConfig(format!(
            "need 0 <= fmin < fmax <= sr/2, got {fmin}..{fmax} at {sample_rate} Hz"
        )));
    }
    let (to, from): (fn(f64) -> f64, fn(f64) -> f64) = match spacing {
        FilterSpacing::Mel => (hz_to_mel, mel_to_hz),
        FilterSpacing::Linear => (|f| f, |f| f),
    };
    let (lo, hi) = (to(fmin), to(fmax));
    let edges: Vec<f64> = (0..n_filters + 2)
        .map(|i| from(lo + (hi - lo) * i as f64 / (n_filters + 1) as f64))
        .collect();
    let bins = fft_size / 2 + 1;
    let mut fb = vec![0.0; n_filters * bins];
    for i in 0..n_filters {
        let (l, c, r) = (edges[i], edges[i + 1], edges[i + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / fft_size as f64;
            let v = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            fb[i * bins + k] = v;
        }
    }
    Ok(Tensor::new(vec![n_filters, bins], fb).unwrap())
}

/// Centre frequency of every filter (Hz).
pub fn filter_centers(n_filters: usize, fmin: f64, fmax: f64, spacing: FilterSpacing) -> Vec<f64> {
    let (lo, hi) = match spacing {
        FilterSpacing::Mel => (hz_to_mel(fmin), hz_to_mel(fmax)),
        FilterSpacing::Linear => (fmin, fmax),
    };
    (1..=n_filters)
        .map(|i| {
            let v = lo + (hi - lo) * i as f64 / (n_filters + 1) as f64;
            match spacing {
                FilterSpacing::Mel => mel_to_hz(v),
                FilterSpacing::Linear => v,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub stft: StftConfig,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub spacing: FilterSpacing,
    pub log_floor: f64,
    pub delta_n: usize,
    pub frames: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            stft: StftConfig::features(),
            n_mels: 40,
            fmin: 300.0,
            fmax: 8000.0,
            spacing: FilterSpacing::Mel,
            log_floor: 1e-10,
            delta_n: 2,
            frames: 300,
        }
    }
}

/// `ln(melfb · |STFT|² + floor)`, shape `[frames, n_mels]`.
pub fn log_mel_static(x: &[f64], cfg: &FeatureConfig) -> Result<Tensor, SpectralError> {
    let spec = stft(x, &cfg.stft)?;
    let fb = mel_filterbank(
        cfg.n_mels,
        cfg.fmin,
        cfg.fmax,
        cfg.stft.fft_size,
        cfg.stft.sample_rate,
        cfg.spacing,
    )?;
    let bins = spec.bins;
    let mut out = Vec::with_capacity(spec.frames * cfg.n_mels);
    for t in 0..spec.frames {
        let power: Vec<f64> = spec.frame(t).iter().map(|c| c.norm_sqr()).collect();
        for m in 0..cfg.n_mels {
            let row = &fb.data()[m * bins..(m + 1) * bins];
            let e: f64 = row.iter().zip(&power).map(|(a, b)| a * b).sum();
            out.push((e + cfg.log_floor).ln());
        }
    }
    Ok(Tensor::new(vec![spec.frames, cfg.n_mels], out).unwrap())
}

/// Regression delta over frames with edge replication:
/// `d_t = Σ_{n=1..N} n (x_{t+n} − x_{t−n}) / (2 Σ n²)`.
pub fn delta(x: &Tensor, n: usize) -> Tensor {
    assert!(n >= 1, "delta width must be positive");
    assert_eq!(x.rank(), 2);
    let (t_len, f) = (x.shape()[0], x.shape()[1]);
    let denom = 2.0 * (1..=n).map(|k| (k * k) as f64).sum::<f64>();
    let at = |t: isize, j: usize| x.data()[(t.clamp(0, t_len as isize - 1) as usize) * f + j];
    let mut out = vec![0.0; t_len * f];
    for t in 0..t_len as isize {
        for j in 0..f {
            let s: f64 = (1..=n as isize).map(|k| k as f64 * (at(t + k, j) - at(t - k, j))).sum();
            out[t as usize * f + j] = s / denom;
        }
    }
    Tensor::new(vec![t_len, f], out).unwrap()
}

/// Static, delta and delta-delta stacked as `[frames, n_mels, 3]` at natural length.
pub fn melspec_3d_full(x: &[f64], cfg: &FeatureConfig) -> Result<Tensor, SpectralError> {
    let s = log_mel_static(x, cfg)?;
    let d = delta(&s, cfg.delta_n);
    let dd = delta(&d, cfg.delta_n);
    let mut out = Vec::with_capacity(s.numel() * 3);
    for ((a, b), c) in s.data().iter().zip(d.data()).zip(dd.data()) {
        out.extend_from_slice(&[*a, *b, *c]);
    }
    let mut shape = s.shape().to_vec();
    shape.push(3);
    Ok(Tensor::new(shape, out).unwrap())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Crop {
    /// Middle `frames` frames (evaluation).
    Center,
    /// Uniformly placed window (training).
    Random,
}

/// Crop or zero-pad the leading (time) axis to exactly `frames`.
pub fn fix_length<R: Rng + ?Sized>(t: &Tensor, frames: usize, crop: Crop, rng: &mut R) -> Tensor {
    let len = t.shape()[0];
    let row: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = frames;
    if len >= frames {
        let start = match crop {
            Crop::Center => (len - frames) / 2,
            Crop::Random => rng.gen_range(0..=len - frames),
        };
        Tensor::new(shape, t.data()[start * row..(start + frames) * row].to_vec()).unwrap()
    } else {
        let mut data = t.data().to_vec();
        data.resize(frames * row, 0.0);
        Tensor::new(shape, data).unwrap()
    }
}

/// 3D log-mel features of fixed length `[cfg.frames, n_mels, 3]`.
pub fn melspec_3d<R: Rng + ?Sized>(x: &[f64], cfg: &FeatureConfig, crop: Crop, rng: &mut R) -> Result<Tensor, SpectralError> {
    Ok(fix_length(&melspec_3d_full(x, cfg)?, cfg.frames, crop, rng))
}

pub const SPECGAN_SLICE: usize = 16_384;
pub const SPECGAN_SIZE: usize = 128;
const SPECGAN_MAG_FLOOR: f64 = 1e-6;
const SPECGAN_STD_FLOOR: f64 = 1e-6;
pub const GRIFFIN_LIM_ITERS: usize = 16;

/// Per-frequency-bin statistics of SpecGAN log-magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecganNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl SpecganNorm {
    /// Accumulate statistics over every frame of every slice.
    pub fn fit(slices: &[Vec<f64>]) -> Result<Self, SpectralError> {
        let n = SPECGAN_SIZE;
        let mut sum = vec![0.0; n];
        let mut sq = vec![0.0; n];
        let mut count = 0.0;
        for s in slices {
            let lm = specgan_log_magnitude(s)?;
            for row in lm.data().chunks(n) {
                for k in 0..n {
                    sum[k] += row[k];
                    sq[k] += row[k] * row[k];
                }
                count += 1.0;
            }
        }
        if count == 0.0 {
            return Err(SpectralError::InvalidConfig("no slices to fit normalisation".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / count - m * m).max(0.0).sqrt().max(SPECGAN_STD_FLOOR))
            .collect();
        Ok(SpecganNorm { mean, std })
    }

    /// `[2, 128]`: row 0 means, row 1 standard deviations.
    pub fn to_tensor(&self) -> Tensor {
        let mut d = self.mean.clone();
        d.extend_from_slice(&self.std);
        Tensor::new(vec![2, self.mean.len()], d).unwrap()
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, SpectralError> {
        if t.shape() != [2, SPECGAN_SIZE] {
            return Err(SpectralError::InvalidConfig(format!("normalisation tensor shape {:?}", t.shape())));
        }
        let (m, s) = t.data().split_at(SPECGAN_SIZE);
        if s.iter().any(|v| !(*v > 0.0)) {
            return Err(SpectralError::InvalidConfig("non-positive standard deviation".into()));
        }
        Ok(SpecganNorm {
            mean: m.to_vec(),
            std: s.to_vec(),
        })
    }
}

/// `ln(|X| + floor)` of the first 16384 samples: 127 frames, the last replicated
/// to make 128, Nyquist bin dropped. Shape `[128 frames, 128 bins]`.
pub fn specgan_log_magnitude(x: &[f64]) -> Result<Tensor, SpectralError> {
    if x.len() < SPECGAN_SLICE {
        return Err(SpectralError::TooShort {
            len: x.len(),
            needed: SPECGAN_SLICE,
        });
    }
    let spec = stft(&x[..SPECGAN_SLICE], &StftConfig::specgan())?;
    let n = SPECGAN_SIZE;
    let mut out = Vec::with_capacity(n * n);
    for t in 0..spec.frames {
        out.extend(spec.frame(t)[..n].iter().map(|c| (c.norm() + SPECGAN_MAG_FLOOR).ln()));
    }
    let last = out[(spec.frames - 1) * n..].to_vec();
    for _ in spec.frames..n {
        out.extend_from_slice(&last);
    }
    Ok(Tensor::new(vec![n, n], out).unwrap())
}

/// Standardise per bin, clip to ±3 standard deviations, scale into [−1, 1].
pub fn specgan_forward(x: &[f64], norm: &SpecganNorm) -> Result<Tensor, SpectralError> {
    let mut lm = specgan_log_magnitude(x)?;
    for row in lm.data_mut().chunks_mut(SPECGAN_SIZE) {
        for (k, v) in row.iter_mut().enumerate() {
            *v = ((*v - norm.mean[k]) / norm.std[k]).clamp(-3.0, 3.0) / 3.0;
        }
    }
    Ok(lm)
}

/// Magnitudes (127 frames × 129 bins) implied by a normalised 128×128 image.
pub fn specgan_magnitude(spec: &Tensor, norm: &SpecganNorm) -> Spectrogram {
    let n = SPECGAN_SIZE;
    assert_eq!(spec.shape(), [n, n], "SpecGAN images are 128x128");
    let cfg = StftConfig::specgan();
    let frames = cfg.frames_for(SPECGAN_SLICE);
    let bins = cfg.bins();
    let mut data = Vec::with_capacity(frames * bins);
    for row in spec.data().chunks(n).take(frames) {
        for k in 0..n {
            let lm = row[k] * 3.0 * norm.std[k] + norm.mean[k];
            data.push(Complex::new((lm.exp() - SPECGAN_MAG_FLOOR).max(0.0), 0.0));
        }
        data.push(Complex::new(0.0, 0.0));
    }
    Spectrogram {
        frames,
        bins,
        data,
        config: cfg,
    }
}

/// Undo the SpecGAN scaling and estimate phase with 16 Griffin-Lim iterations.
pub fn specgan_inverse(spec: &Tensor, norm: &SpecganNorm) -> Result<Vec<f64>, SpectralError> {
    let mag = specgan_magnitude(spec, norm);
    Ok(griffin_lim(&mag, GRIFFIN_LIM_ITERS)?.signal)
}

pub struct GriffinLim {
    pub signal: Vec<f64>,
    /// Spectral distance before the first update and after each iteration.
    pub distances: Vec<f64>,
}

/// Distance between a spectrogram's magnitude and a target, counting each
/// one-sided bin as often as it appears in the full spectrum.
pub fn spectral_distance(s: &Spectrogram, target: &Spectrogram) -> f64 {
    let n = s.config.fft_size;
    let mut acc = 0.0;
    for t in 0..s.frames {
        for k in 0..s.bins {
            let w = if k == 0 || (n % 2 == 0 && k == n / 2) { 1.0 } else { 2.0 };
            let d = s.frame(t)[k].norm() - target.frame(t)[k].norm();
            acc += w * d * d;
        }
    }
    acc.sqrt()
}

/// Griffin-Lim from zero phase; uses the magnitudes of `mag` only.
pub fn griffin_lim(mag: &Spectrogram, iters: usize) -> Result<GriffinLim, SpectralError> {
    let cfg = mag.config;
    let target: Vec<f64> = mag.magnitude();
    let mut estimate = Spectrogram {
        data: target.iter().map(|&m| Complex::new(m, 0.0)).collect(),
        ..mag.clone()
    };
    let mut signal = istft(&estimate)?;
    let mut distances = Vec::with_capacity(iters + 1);
    for k in 0..=iters {
        let s = stft(&signal, &cfg)?;
        distances.push(spectral_distance(&s, mag));
        if k == iters {
            break;
        }
        for ((e, c), m) in estimate.data.iter_mut().zip(&s.data).zip(&target) {
            let r = c.norm();
            *e = if r > 0.0 { c * (m / r) } else { Complex::new(*m, 0.0) };
        }
        signal = istft(&estimate)?;
    }
    Ok(GriffinLim { signal, distances })
}

/// Frequency (Hz) of the largest Hann-windowed FFT bin over the whole signal.
pub fn peak_frequency(x: &[f64], sample_rate: u32) -> f64 {
    let n = x.len();
    let w = hann(n);
    let mut buf: Vec<Complex<f64>> = x.iter().zip(&w).map(|(a, b)| Complex::new(a * b, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let k = (1..n / 2 + 1)
        .max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm()))
        .unwrap_or(0);
    k as f64 * sample_rate as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin())
            .collect()
    }

    fn snr_db(reference: &[f64], test: &[f64]) -> f64 {
        let s: f64 = reference.iter().map(|v| v * v).sum();
        let e: f64 = reference.iter().zip(test).map(|(a, b)| (a - b) * (a - b)).sum();
        10.0 * (s / e).log10()
    }

    /// Direct O(N²) DFT of one frame.
    fn dft(frame: &[f64], n: usize) -> Vec<Complex<f64>> {
        (0..n / 2 + 1)
            .map(|k| {
                frame.iter().enumerate().fold(Complex::new(0.0, 0.0), |acc, (i, &v)| {
                    let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                    acc + Complex::new(v * ang.cos(), v * ang.sin())
                })
            })
            .collect()
    }

    #[test]
    fn framing_counts() {
        let s = stft(&vec![0.0; 16000], &StftConfig::features()).unwrap();
        assert_eq!((s.frames, s.bins), (98, 257));
        assert!(matches!(
            stft(&[0.0; 10], &StftConfig::features()),
            Err(SpectralError::TooShort { .. })
        ));
    }

    #[test]
    fn dc_lands_in_bin_zero() {
        let s = stft(&vec![0.7; 2000], &StftConfig::features()).unwrap();
        for t in 0..s.frames {
            let f = s.frame(t);
            let k = (0..s.bins).max_by(|&a, &b| f[a].norm().total_cmp(&f[b].norm())).unwrap();
            assert_eq!(k, 0);
        }
        // without zero padding the periodic Hann spectrum occupies bins 0 and 1 only
        let s = stft(&vec![0.7; 2000], &StftConfig::specgan()).unwrap();
        for t in 0..s.frames {
            assert!(s.frame(t)[2..].iter().all(|c| c.norm() < 1e-12));
        }
    }

    #[test]
    fn one_kilohertz_peaks_at_bin_32_and_matches_direct_dft() {
        let cfg = StftConfig::features();
        let x = sine(1000.0, 16000);
        let s = stft(&x, &cfg).unwrap();
        let w = hann(cfg.window);
        let frame: Vec<f64> = (0..cfg.window).map(|i| x[5 * cfg.hop + i] * w[i]).collect();
        let direct = dft(&frame, cfg.fft_size);
        for (a, b) in s.frame(5).iter().zip(&direct) {
            assert!((a - b).norm() < 1e-9);
        }
        for t in 0..s.frames {
            let f = s.frame(t);
            let k = (0..s.bins).max_by(|&a, &b| f[a].norm().total_cmp(&f[b].norm())).unwrap();
            assert_eq!(k, 32);
        }
    }

    proptest! {
        #[test]
        fn parseval_per_frame(xs in proptest::collection::vec(-1.0f64..1.0, 400..900), a in -3.0f64..3.0) {
            let cfg = StftConfig::features();
            let s = stft(&xs, &cfg).unwrap();
            let w = hann(cfg.window);
            for t in 0..s.frames {
                let f = s.frame(t);
                let n = cfg.fft_size;
                let full: f64 = (0..s.bins)
                    .map(|k| if k == 0 || k == n / 2 { f[k].norm_sqr() } else { 2.0 * f[k].norm_sqr() })
                    .sum();
                let time: f64 = (0..cfg.window).map(|i| (w[i] * xs[t * cfg.hop + i]).powi(2)).sum();
                prop_assert!((full - n as f64 * time).abs() <= 1e-9 * (n as f64 * time).max(1e-300));
            }
            let scaled: Vec<f64> = xs.iter().map(|v| a * v).collect();
            let s2 = stft(&scaled, &cfg).unwrap();
            for (p, q) in s.data.iter().zip(&s2.data) {
                prop_assert!((p * a - q).norm() <= 1e-9 * (1.0 + q.norm()));
            }
        }
    }

    #[test]
    fn istft_round_trip_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..8000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for cfg in [StftConfig::features(), StftConfig::specgan()] {
            let s = stft(&x, &cfg).unwrap();
            let y = istft(&s).unwrap();
            let (a, b) = (cfg.window, y.len() - cfg.window);
            assert!(snr_db(&x[a..b], &y[a..b]) > 100.0);
            let z = Spectrogram {
                data: vec![Complex::new(0.0, 0.0); s.data.len()],
                ..s
            };
            assert!(istft(&z).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_frame_inverse_is_windowed_segment() {
        let cfg = StftConfig::specgan();
        let x = sine(440.0, cfg.window);
        let s = stft(&x, &cfg).unwrap();
        assert_eq!(s.frames, 1);
        // the LS inverse divides the windowed frame by w², i.e. returns x where w > 0
        let y = istft(&s).unwrap();
        let w = hann(cfg.window);
        let ww: Vec<f64> = x.iter().zip(&w).map(|(a, b)| a * b).collect();
        let yw: Vec<f64> = y.iter().zip(&w).map(|(a, b)| a * b).collect();
        assert!(snr_db(&ww, &yw) > 40.0);
    }

    #[test]
    fn hop_without_coverage_is_rejected() {
        let cfg = StftConfig {
            window: 4,
            hop: 4,
            fft_size: 4,
            sample_rate: 16000,
        };
        let s = stft(&[1.0; 8], &cfg).unwrap();
        assert!(matches!(istft(&s), Err(SpectralError::NotInvertible)));
    }

    #[test]
    fn filterbank_geometry() {
        let fb = mel_filterbank(40, 300.0, 8000.0, 512, 16000, FilterSpacing::Mel).unwrap();
        assert_eq!(fb.shape(), &[40, 257]);
        assert!(fb.data().iter().all(|&v| v >= 0.0));
        for row in fb.data().chunks(257) {
            assert!(row.iter().sum::<f64>() > 0.0);
        }
        let centers = filter_centers(40, 300.0, 8000.0, FilterSpacing::Mel);
        assert!(centers.windows(2).all(|w| w[0] < w[1]));
        assert!(centers[0] > 300.0 && centers[39] < 8000.0);
        let delta = (hz_to_mel(8000.0) - hz_to_mel(300.0)) / 41.0;
        assert!((centers[0] - mel_to_hz(hz_to_mel(300.0) + delta)).abs() < 1e-9);
        assert!((hz_to_mel(1000.0) - 999.98553).abs() < 1e-4);
        assert!(mel_filterbank(40, 8000.0, 300.0, 512, 16000, FilterSpacing::Mel).is_err());
        let lin = filter_centers(40, 300.0, 8000.0, FilterSpacing::Linear);
        assert!((lin[1] - lin[0] - 7700.0 / 41.0).abs() < 1e-9);
    }

    #[test]
    fn log_mel_floor_and_scaling() {
        let cfg = FeatureConfig::default();
        let s = log_mel_static(&vec![0.0; 4000], &cfg).unwrap();
        assert!(s.data().iter().all(|&v| v == (1e-10f64).ln()));
        let x = sine(1000.0, 4000);
        let a = log_mel_static(&x, &cfg).unwrap();
        let b = log_mel_static(&x.iter().map(|v| 2.0 * v).collect::<Vec<_>>(), &cfg).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            if *p > -5.0 {
                assert!((q - p - 4f64.ln()).abs() < 1e-6);
            }
        }
        let fb = mel_filterbank(40, 300.0, 8000.0, 512, 16000, FilterSpacing::Mel).unwrap();
        let row = &a.data()[..40];
        let m = (0..40).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap();
        // the winning band has non-zero response at 1 kHz (bin 32)
        assert!(fb.data()[m * 257 + 32] > 0.0);
    }

    #[test]
    fn delta_rules() {
        let ramp = Tensor::new(vec![10, 1], (0..10).map(|i| 3.0 * i as f64).collect()).unwrap();
        let d = delta(&ramp, 2);
        for t in 2..8 {
            assert!((d.data()[t] - 3.0).abs() < 1e-12);
        }
        let c = delta(&Tensor::full(&[5, 2], 4.0), 2);
        assert!(c.data().iter().all(|&v| v == 0.0));
        let x = [0.3, -1.2, 2.0, 0.1, 0.7, -0.4];
        let d = delta(&Tensor::new(vec![6, 1], x.to_vec()).unwrap(), 2);
        for t in 0..6i32 {
            let g = |i: i32| x[i.clamp(0, 5) as usize];
            let want = ((g(t + 1) - g(t - 1)) + 2.0 * (g(t + 2) - g(t - 2))) / 10.0;
            assert!((d.data()[t as usize] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn melspec_shape_contract() {
        let cfg = FeatureConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for secs in [0.2, 1.0, 3.5, 10.0] {
            let x = sine(500.0, (secs * 16000.0) as usize);
            for crop in [Crop::Center, Crop::Random] {
                let m = melspec_3d(&x, &cfg, crop, &mut rng).unwrap();
                assert_eq!(m.shape(), &[300, 40, 3]);
                assert!(m.is_finite());
            }
        }
        let full = melspec_3d_full(&sine(500.0, 16000), &cfg).unwrap();
        let (t, f) = (full.shape()[0], 40);
        let ch = |c: usize| {
            Tensor::new(vec![t, f], full.data().iter().skip(c).step_by(3).copied().collect()).unwrap()
        };
        assert_eq!(delta(&ch(1), 2), ch(2));
        assert_eq!(delta(&ch(0), 2), ch(1));
    }

    fn tone_norm() -> SpecganNorm {
        let slices: Vec<Vec<f64>> = [300.0, 800.0, 2000.0]
            .iter()
            .map(|f| sine(*f, SPECGAN_SLICE).iter().map(|v| 0.5 * v).collect())
            .collect();
        SpecganNorm::fit(&slices).unwrap()
    }

    #[test]
    fn specgan_range_and_mean_image() {
        let norm = tone_norm();
        assert!(norm.std.iter().all(|&s| s > 0.0));
        let x = sine(1234.0, SPECGAN_SLICE + 100);
        let img = specgan_forward(&x, &norm).unwrap();
        assert_eq!(img.shape(), &[128, 128]);
        assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let lm = specgan_log_magnitude(&x).unwrap();
        let flat = SpecganNorm {
            mean: lm.data()[..128].to_vec(),
            std: vec![1.0; 128],
        };
        let z = specgan_forward(&x, &flat).unwrap();
        assert!(z.data()[..128].iter().all(|&v| v == 0.0));
        assert!(specgan_forward(&x[..1000], &norm).is_err());
        let t = SpecganNorm::from_tensor(&norm.to_tensor()).unwrap();
        assert_eq!(t, norm);
    }

    #[test]
    fn griffin_lim_is_monotone_and_finds_the_tone() {
        let x = sine(1000.0, SPECGAN_SLICE);
        let s = stft(&x, &StftConfig::specgan()).unwrap();
        let gl = griffin_lim(&s, 16).unwrap();
        assert_eq!(gl.distances.len(), 17);
        for w in gl.distances.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
        assert_eq!(gl.signal.len(), SPECGAN_SLICE);
        assert!((peak_frequency(&gl.signal, 16000) - 1000.0).abs() <= 16000.0 / SPECGAN_SLICE as f64);
        let zero = Spectrogram {
            data: vec![Complex::new(0.0, 0.0); s.data.len()],
            ..s
        };
        assert!(griffin_lim(&zero, 16).unwrap().signal.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn specgan_round_trip_keeps_the_tone() {
        let norm = tone_norm();
        let x = sine(800.0, SPECGAN_SLICE);
        let y = specgan_inverse(&specgan_forward(&x, &norm).unwrap(), &norm).unwrap();
        assert_eq!(y.len(), SPECGAN_SLICE);
        let bin = 16000.0 / SPECGAN_SLICE as f64;
        assert!((peak_frequency(&y, 16000) - peak_frequency(&x, 16000)).abs() <= bin);
        let again = specgan_inverse(&specgan_forward(&x, &norm).unwrap(), &norm).unwrap();
        assert_eq!(y, again);
        let quiet = specgan_inverse(&Tensor::full(&[128, 128], -1.0), &norm).unwrap();
        let rms = |v: &[f64]| (v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64).sqrt();
        assert!(rms(&quiet) < 0.05 * rms(&y));
    }
}
