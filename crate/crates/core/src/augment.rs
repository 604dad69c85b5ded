//! Time shifting, phase-vocoder time stretching, pitch shifting and the
//! class-balancing augmentation planner.

use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioError, EmotionLabel, Provenance, UtteranceRecord, Waveform, CANONICAL_SR};
use crate::spectral::{istft, stft, SpectralError, Spectrogram, StftConfig};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("stretch ratio {0} outside the supported range [0.25, 4]")]
    RatioOutOfRange(f64),
    #[error("roll by {tau} samples needs a signal longer than {len} samples")]
    RollTooLong { tau: usize, len: usize },
    #[error("class {0} has no utterances to draw from")]
    EmptyClass(EmotionLabel),
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("unknown augmentation method {0:?}")]
    UnknownMethod(String),
    #[error("plan item {0} needs a generator, not a signal transform")]
    NeedsGenerator(String),
    #[error("source {0} not in catalog")]
    MissingSource(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    /// Displace and fill the vacated span with silence.
    Shift,
    /// Rotate circularly.
    Roll,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub tau: usize,
    pub direction: Direction,
    pub mode: ShiftMode,
}

impl ShiftSpec {
    /// `tau = sample_rate / 100`, forward shift.
    pub fn for_rate(sample_rate: u32) -> Self {
        ShiftSpec {
            tau: (sample_rate / 100) as usize,
            direction: Direction::Forward,
            mode: ShiftMode::Shift,
        }
    }
}

/// Forward moves content later in time: `out[t] = in[t - tau]`.
pub fn time_shift(w: &Waveform, spec: &ShiftSpec) -> Result<Waveform, AugmentError> {
    let n = w.len();
    let tau = spec.tau;
    let samples = match spec.mode {
        ShiftMode::Roll => {
            if tau >= n && n > 0 {
                return Err(AugmentError::RollTooLong { tau, len: n });
            }
            let mut s = w.samples.clone();
            if n > 0 {
                match spec.direction {
                    Direction::Forward => s.rotate_right(tau),
                    Direction::Backward => s.rotate_left(tau),
                }
            }
            s
        }
        ShiftMode::Shift => {
            let mut s = vec![0.0; n];
            let k = tau.min(n);
            match spec.direction {
                Direction::Forward => s[k..].copy_from_slice(&w.samples[..n - k]),
                Direction::Backward => s[..n - k].copy_from_slice(&w.samples[k..]),
            }
            s
        }
    };
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}

pub const VOCODER_FFT: usize = 2048;
pub const VOCODER_HOP: usize = 512;
pub const MIN_RATIO: f64 = 0.25;
pub const MAX_RATIO: f64 = 4.0;

fn check_ratio(ratio: f64) -> Result<(), AugmentError> {
    if ratio.is_finite() && (MIN_RATIO..=MAX_RATIO).contains(&ratio) {
        Ok(())
    } else {
        Err(AugmentError::RatioOutOfRange(ratio))
    }
}

fn wrap_phase(p: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    p - two_pi * (p / two_pi).round()
}

/// Phase-vocoder time stretch of raw samples; output has `round(len / ratio)` samples.
pub fn stretch_samples(x: &[f64], ratio: f64) -> Result<Vec<f64>, AugmentError> {
    check_ratio(ratio)?;
    let out_len = (x.len() as f64 / ratio).round() as usize;
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = StftConfig {
        window: VOCODER_FFT,
        hop: VOCODER_HOP,
        fft_size: VOCODER_FFT,
        sample_rate: CANONICAL_SR,
    };
    // centred frames: pad half a window of silence on each side
    let pad = VOCODER_FFT / 2;
    let mut padded = vec![0.0; pad];
    padded.extend_from_slice(x);
    padded.resize(x.len() + 2 * pad, 0.0);
    let spec = stft(&padded, &cfg)?;
    let bins = spec.bins;
    let frames = spec.frames;
    let advance: Vec<f64> = (0..bins)
        .map(|k| 2.0 * std::f64::consts::PI * VOCODER_HOP as f64 * k as f64 / VOCODER_FFT as f64)
        .collect();
    let zero = vec![Complex::new(0.0, 0.0); bins];
    let column = |t: usize| if t < frames { spec.frame(t) } else { &zero[..] };
    let steps: Vec<f64> = (0..)
        .map(|i| i as f64 * ratio)
        .take_while(|&t| t < frames as f64)
        .collect();
    let mut phase: Vec<f64> = spec.frame(0).iter().map(|c| c.arg()).collect();
    let mut data = Vec::with_capacity(steps.len() * bins);
    for &t in &steps {
        let i = t.floor() as usize;
        let alpha = t - i as f64;
        let (c0, c1) = (column(i), column(i + 1));
        for k in 0..bins {
            let mag = (1.0 - alpha) * c0[k].norm() + alpha * c1[k].norm();
            data.push(Complex::from_polar(mag, phase[k]));
            let dphi = wrap_phase(c1[k].arg() - c0[k].arg() - advance[k]);
            phase[k] += advance[k] + dphi;
        }
    }
    let stretched = Spectrogram {
        frames: steps.len(),
        bins,
        data,
        config: cfg,
    };
    let y = istft(&stretched)?;
    let mut out: Vec<f64> = y.into_iter().skip(pad).take(out_len).collect();
    out.resize(out_len, 0.0);
    Ok(out)
}

/// `ratio > 1` speeds up (shorter output), `ratio < 1` slows down; pitch is kept.
pub fn time_stretch(w: &Waveform, ratio: f64) -> Result<Waveform, AugmentError> {
    Ok(Waveform {
        samples: stretch_samples(&w.samples, ratio)?,
        sample_rate: w.sample_rate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitchSpec {
    pub nhs: f64,
    pub nbins: u32,
}

impl PitchSpec {
    pub fn semitones(nhs: f64) -> Self {
        PitchSpec { nhs, nbins: 12 }
    }

    /// Time-stretch ratio `2^(-nhs / nbins)`.
    pub fn stretch_ratio(&self) -> f64 {
        2f64.powf(-self.nhs / self.nbins as f64)
    }
}

/// Stretch by `2^(-nhs/nbins)`, then resample by the same ratio so the
/// length is restored and every frequency is scaled by `2^(nhs/nbins)`.
pub fn pitch_shift(w: &Waveform, spec: &PitchSpec) -> Result<Waveform, AugmentError> {
    assert!(spec.nbins >= 1, "nbins must be positive");
    let ratio = spec.stretch_ratio();
    let stretched = stretch_samples(&w.samples, ratio)?;
    // the stretched signal, read at sr / ratio, is brought back to sr
    let samples = audio::resample_ratio(&stretched, ratio, w.len());
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMethod {
    TimeShift,
    PitchShift,
    Wavegan,
    Specgan,
}

impl AugmentMethod {
    pub fn provenance(self) -> Provenance {
        match self {
            AugmentMethod::TimeShift => Provenance::TimeShift,
            AugmentMethod::PitchShift => Provenance::PitchShift,
            AugmentMethod::Wavegan => Provenance::Wavegan,
            AugmentMethod::Specgan => Provenance::Specgan,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            AugmentMethod::TimeShift => "ts",
            AugmentMethod::PitchShift => "ps",
            AugmentMethod::Wavegan => "wg",
            AugmentMethod::Specgan => "sg",
        }
    }
}

impl FromStr for AugmentMethod {
    type Err = AugmentError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "time" | "time_shift" => AugmentMethod::TimeShift,
            "pitch" | "pitch_shift" => AugmentMethod::PitchShift,
            "wavegan" | "wave" => AugmentMethod::Wavegan,
            "specgan" | "spec" => AugmentMethod::Specgan,
            _ => return Err(AugmentError::UnknownMethod(s.to_string())),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentParams {
    TimeShift { tau: usize, direction: Direction },
    PitchShift { nhs: i32 },
    /// Seed for the generator's latent draw.
    Generated { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanItem {
    pub source_id: String,
    pub label: EmotionLabel,
    pub method: AugmentMethod,
    pub params: AugmentParams,
    pub output_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancePlan {
    pub target: usize,
    pub counts_before: [usize; 7],
    pub items: Vec<PlanItem>,
}

/// Raise every class to the majority count with synthetic items drawn from
/// its own utterances (with replacement). Pure in `(catalog, method, seed)`.
pub fn plan_balance(catalog: &[UtteranceRecord], method: AugmentMethod, seed: u64) -> Result<BalancePlan, AugmentError> {
    if catalog.is_empty() {
        return Err(AugmentError::EmptyCatalog);
    }
    let counts = audio::class_counts(catalog);
    if let Some(l) = EmotionLabel::ALL.into_iter().find(|l| counts[l.code()] == 0) {
        return Err(AugmentError::EmptyClass(l));
    }
    let target = *counts.iter().max().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_tau = (CANONICAL_SR / 10) as usize;
    let mut items = Vec::new();
    for label in EmotionLabel::ALL {
        let sources: Vec<&UtteranceRecord> = catalog.iter().filter(|r| r.label == label).collect();
        for _ in counts[label.code()]..target {
            let src = sources.choose(&mut rng).unwrap();
            let params = match method {
                AugmentMethod::TimeShift => AugmentParams::TimeShift {
                    tau: rng.gen_range(1..=max_tau),
                    direction: if rng.gen::<bool>() {
                        Direction::Forward
                    } else {
                        Direction::Backward
                    },
                },
                AugmentMethod::PitchShift => AugmentParams::PitchShift {
                    nhs: *[-2, -1, 1, 2].choose(&mut rng).unwrap(),
                },
                AugmentMethod::Wavegan | AugmentMethod::Specgan => AugmentParams::Generated { seed: rng.gen() },
            };
            items.push(PlanItem {
                source_id: src.id.clone(),
                label,
                method,
                params,
                output_id: format!("{}_{}{:04}", src.id, method.tag(), items.len()),
            });
        }
    }
    Ok(BalancePlan {
        target,
        counts_before: counts,
        items,
    })
}

/// Apply a signal-transform plan item (time or pitch shift) to its source.
pub fn apply_item(item: &PlanItem, source: &Waveform) -> Result<Waveform, AugmentError> {
    match item.params {
        AugmentParams::TimeShift { tau, direction } => {
            let spec = ShiftSpec {
                tau: tau.min(source.len().saturating_sub(1)),
                direction,
                mode: ShiftMode::Roll,
            };
            time_shift(source, &spec)
        }
        AugmentParams::PitchShift { nhs } => pitch_shift(source, &PitchSpec::semitones(nhs as f64)),
        AugmentParams::Generated { .. } => Err(AugmentError::NeedsGenerator(item.output_id.clone())),
    }
}

/// Execute time/pitch plan items: read each source, write `<out_dir>/<output_id>.wav`,
/// and return the new catalog records.
pub fn execute_plan(
    plan: &BalancePlan,
    catalog: &[UtteranceRecord],
    out_dir: &Path,
) -> Result<Vec<UtteranceRecord>, AugmentError> {
    let mut out = Vec::with_capacity(plan.items.len());
    for item in &plan.items {
        let src = catalog
            .iter()
            .find(|r| r.id == item.source_id)
            .ok_or_else(|| AugmentError::MissingSource(item.source_id.clone()))?;
        let wave = audio::load_canonical(&src.path)?;
        let aug = apply_item(item, &wave)?;
        let path = out_dir.join(format!("{}.wav", item.output_id));
        audio::write_wav(&aug, &path)?;
        out.push(UtteranceRecord {
            id: item.output_id.clone(),
            speaker: src.speaker.clone(),
            label: item.label,
            path,
            provenance: item.method.provenance(),
        });
    }
    Ok(out)
}
