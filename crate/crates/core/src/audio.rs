//! Waveforms, WAV I/O, resampling and the EmoDB catalog.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ser_neural::tensor_file::{tensor_read, tensor_write};

/// Sample rate every feature and model in the pipeline works at.
pub const CANONICAL_SR: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("unsupported WAV encoding: format tag {0} is not PCM")]
    NotPcm(u16),
    #[error("unsupported WAV encoding: {0} channels, only mono is supported")]
    Channels(u16),
    #[error("unsupported WAV encoding: {0}-bit samples, only 16-bit is supported")]
    BitDepth(u16),
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("bad EmoDB file name {0:?}")]
    BadFileName(String),
    #[error("unknown EmoDB emotion letter {letter:?} in {name:?}")]
    UnknownEmotion { name: String, letter: char },
    #[error("catalog: {0}")]
    Catalog(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidWaveform("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::InvalidWaveform(format!("sample {i} is not finite")));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Anger,
    Boredom,
    Disgust,
    Fear,
    Happiness,
    Sadness,
    Neutral,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; 7] = [
        EmotionLabel::Anger,
        EmotionLabel::Boredom,
        EmotionLabel::Disgust,
        EmotionLabel::Fear,
        EmotionLabel::Happiness,
        EmotionLabel::Sadness,
        EmotionLabel::Neutral,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Anger => "anger",
            EmotionLabel::Boredom => "boredom",
            EmotionLabel::Disgust => "disgust",
            EmotionLabel::Fear => "fear",
            EmotionLabel::Happiness => "happiness",
            EmotionLabel::Sadness => "sadness",
            EmotionLabel::Neutral => "neutral",
        }
    }

    /// Decode the German emotion letter used in EmoDB file names.
    pub fn from_emodb_letter(c: char) -> Option<Self> {
        Some(match c {
            'W' => EmotionLabel::Anger,
            'L' => EmotionLabel::Boredom,
            'E' => EmotionLabel::Disgust,
            'A' => EmotionLabel::Fear,
            'F' => EmotionLabel::Happiness,
            'T' => EmotionLabel::Sadness,
            'N' => EmotionLabel::Neutral,
            _ => return None,
        })
    }

    pub fn emodb_letter(self) -> char {
        match self {
            EmotionLabel::Anger => 'W',
            EmotionLabel::Boredom => 'L',
            EmotionLabel::Disgust => 'E',
            EmotionLabel::Fear => 'A',
            EmotionLabel::Happiness => 'F',
            EmotionLabel::Sadness => 'T',
            EmotionLabel::Neutral => 'N',
        }
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = AudioError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| AudioError::Catalog(format!("unknown emotion label {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    TimeShift,
    PitchShift,
    Wavegan,
    Specgan,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker: String,
    pub label: EmotionLabel,
    pub path: PathBuf,
    pub provenance: Provenance,
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decode a RIFF/WAVE byte buffer holding 16-bit mono PCM.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform, AudioError> {
    let bad = |m: &str| AudioError::MalformedHeader(m.to_string());
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("missing RIFF/WAVE tags"));
    }
    let mut at = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = read_u32(bytes, at + 4) as usize;
        let body = at + 8;
        if id == b"fmt " {
            if size < 16 || body + 16 > bytes.len() {
                return Err(bad("fmt chunk too short"));
            }
            fmt = Some((
                read_u16(bytes, body),
                read_u16(bytes, body + 2),
                read_u32(bytes, body + 4),
                read_u16(bytes, body + 14),
            ));
        } else if id == b"data" {
            let (tag, channels, rate, bits) = fmt.ok_or_else(|| bad("data chunk before fmt chunk"))?;
            if tag != 1 {
                return Err(AudioError::NotPcm(tag));
            }
            if channels != 1 {
                return Err(AudioError::Channels(channels));
            }
            if bits != 16 {
                return Err(AudioError::BitDepth(bits));
            }
            if rate == 0 {
                return Err(bad("zero sample rate"));
            }
            let end = body.checked_add(size).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("data chunk overruns file"))?;
            let samples = bytes[body..end]
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                .collect();
            return Ok(Waveform {
                samples,
                sample_rate: rate,
            });
        }
        at = body + size + (size & 1);
    }
    Err(bad(if fmt.is_some() { "no data chunk" } else { "no fmt chunk" }))
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, AudioError> {
    decode_wav(&fs::read(path)?)
}

/// Quantise one sample the way [`write_wav`] stores it.
pub fn quantize16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let data_len = 2 * w.samples.len() as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        out.extend_from_slice(&quantize16(s).to_le_bytes());
    }
    out
}

/// Write 16-bit mono PCM; samples outside [-1, 1] are clamped.
pub fn write_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<(), AudioError> {
    if let Some(parent) = path.as_ref().parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, encode_wav(w))?;
    Ok(())
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let (mut term, mut sum, mut k) = (1.0, 1.0, 1.0);
    while term > sum * 1e-17 {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

const KAISER_BETA: f64 = 8.6;
/// Zero crossings of the sinc kernel on each side of the centre tap.
const HALF_TAPS: usize = 32;
const TABLE_RES: usize = 512;
const ROLLOFF: f64 = 0.95;

/// Kaiser-windowed sinc sampled at `TABLE_RES` points per zero crossing.
fn sinc_table() -> Vec<f64> {
    let n = HALF_TAPS * TABLE_RES;
    let norm = bessel_i0(KAISER_BETA);
    (0..=n + 1)
        .map(|i| {
            let x = i as f64 / TABLE_RES as f64;
            let sinc = if i == 0 {
                1.0
            } else {
                (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
            };
            let r = (x / HALF_TAPS as f64).min(1.0);
            sinc * bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm
        })
        .collect()
}

/// Band-limited resampling by an arbitrary positive `ratio` (output rate / input rate),
/// producing `out_len` samples. Input beyond either end is treated as silence.
pub fn resample_ratio(x: &[f64], ratio: f64, out_len: usize) -> Vec<f64> {
    assert!(ratio > 0.0 && ratio.is_finite());
    let table = sinc_table();
    let cutoff = ROLLOFF * ratio.min(1.0);
    let half_width = HALF_TAPS as f64 / cutoff;
    let kernel = |d: f64| -> f64 {
        let u = d.abs() * cutoff * TABLE_RES as f64;
        let i = u as usize;
        if i >= HALF_TAPS * TABLE_RES {
            return 0.0;
        }
        let frac = u - i as f64;
        table[i] + frac * (table[i + 1] - table[i])
    };
    (0..out_len)
        .map(|n| {
            let t = n as f64 / ratio;
            let lo = ((t - half_width).ceil().max(0.0)) as usize;
            let hi = ((t + half_width).floor() as isize).min(x.len() as isize - 1);
            let mut acc = 0.0;
            if hi >= lo as isize {
                for (k, &xk) in x.iter().enumerate().take(hi as usize + 1).skip(lo) {
                    acc += xk * kernel(t - k as f64);
                }
            }
            acc * cutoff
        })
        .collect()
}

/// Resample to `target_sr`; output length is `round(len · target / source)`.
pub fn resample(w: &Waveform, target_sr: u32) -> Waveform {
    assert!(target_sr > 0, "target sample rate must be positive");
    if target_sr == w.sample_rate {
        return w.clone();
    }
    let ratio = target_sr as f64 / w.sample_rate as f64;
    let out_len = (w.samples.len() as f64 * ratio).round() as usize;
    Waveform {
        samples: resample_ratio(&w.samples, ratio, out_len),
        sample_rate: target_sr,
    }
}

/// Read a WAV file and bring it to the canonical rate when its header differs.
pub fn load_canonical(path: impl AsRef<Path>) -> Result<Waveform, AudioError> {
    let w = read_wav(path)?;
    Ok(if w.sample_rate == CANONICAL_SR {
        w
    } else {
        resample(&w, CANONICAL_SR)
    })
}

/// Decode speaker and emotion from an EmoDB name such as `03a01Wa.wav`.
pub fn parse_emodb_name(name: &str) -> Result<(String, EmotionLabel), AudioError> {
    let stem = name.strip_suffix(".wav").unwrap_or(name);
    let chars: Vec<char> = stem.chars().collect();
    if chars.len() < 6 || !chars[0].is_ascii_digit() || !chars[1].is_ascii_digit() {
        return Err(AudioError::BadFileName(name.to_string()));
    }
    let letter = chars[5];
    let label = EmotionLabel::from_emodb_letter(letter).ok_or_else(|| AudioError::UnknownEmotion {
        name: name.to_string(),
        letter,
    })?;
    Ok((chars[..2].iter().collect(), label))
}

#[derive(Debug)]
pub struct Ingest {
    pub records: Vec<UtteranceRecord>,
    /// Files that could not be decoded, with the reason.
    pub skipped: Vec<(PathBuf, AudioError)>,
}

/// Catalog every `.wav` file in `dir` (sorted by name).
pub fn ingest_emodb(dir: impl AsRef<Path>) -> Result<Ingest, AudioError> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    names.sort();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for path in names {
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        match parse_emodb_name(&name) {
            Ok((speaker, label)) => records.push(UtteranceRecord {
                id: path.file_stem().unwrap().to_string_lossy().to_string(),
                speaker,
                label,
                path,
                provenance: Provenance::Original,
            }),
            Err(e) => skipped.push((path, e)),
        }
    }
    if !skipped.is_empty() {
        log::warn!("skipped {} files with undecodable names", skipped.len());
    }
    Ok(Ingest { records, skipped })
}

pub fn write_catalog(records: &[UtteranceRecord], path: impl AsRef<Path>) -> Result<(), AudioError> {
    if let Some(parent) = path.as_ref().parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_catalog(path: impl AsRef<Path>) -> Result<Vec<UtteranceRecord>, AudioError> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "speaker", "label", "path", "provenance"] {
        return Err(AudioError::Catalog(format!("unexpected header {headers:?}")));
    }
    let records: Vec<UtteranceRecord> = r.deserialize().collect::<Result<_, _>>()?;
    let mut ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(AudioError::Catalog(format!("duplicate id {}", w[0])));
    }
    Ok(records)
}

/// Per-label counts in code order.
pub fn class_counts(records: &[UtteranceRecord]) -> [usize; 7] {
    let mut c = [0; 7];
    for r in records {
        c[r.label.code()] += 1;
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sine(freq: f64, sr: u32, n: usize, amp: f64) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect()
    }

    #[test]
    fn one_second_header_arithmetic() {
        let w = Waveform::new(vec![0.25; 16000], 16000).unwrap();
        let bytes = encode_wav(&w);
        assert_eq!(bytes.len(), 44 + 32000);
        let back = decode_wav(&bytes).unwrap();
        assert_eq!(back.len(), 16000);
        assert_eq!(back.sample_rate, 16000);
        assert_eq!(back.duration_seconds(), 1.0);
    }

    #[test]
    fn clamp_and_zero_payload() {
        let w = Waveform::new(vec![1.5, -2.0, 0.0], 8000).unwrap();
        let bytes = encode_wav(&w);
        assert_eq!(&bytes[44..46], &32767i16.to_le_bytes());
        assert_eq!(&bytes[46..48], &(-32768i16).to_le_bytes());
        let z = encode_wav(&Waveform::new(vec![0.0; 100], 8000).unwrap());
        assert!(z[44..].iter().all(|&b| b == 0));
        assert_eq!(z.len() - 44, 200);
    }

    #[test]
    fn encoding_errors_are_distinct() {
        let mut b = encode_wav(&Waveform::new(vec![0.0; 4], 8000).unwrap());
        let mut stereo = b.clone();
        stereo[22] = 2;
        assert!(matches!(decode_wav(&stereo), Err(AudioError::Channels(2))));
        let mut float = b.clone();
        float[20] = 3;
        assert!(matches!(decode_wav(&float), Err(AudioError::NotPcm(3))));
        let mut eight = b.clone();
        eight[34] = 8;
        assert!(matches!(decode_wav(&eight), Err(AudioError::BitDepth(8))));
        b[0] = b'X';
        assert!(matches!(decode_wav(&b), Err(AudioError::MalformedHeader(_))));
        assert!(matches!(decode_wav(&[0u8; 5]), Err(AudioError::MalformedHeader(_))));
    }

    #[test]
    fn skips_unknown_chunks() {
        let b = encode_wav(&Waveform::new(vec![0.5, -0.5], 8000).unwrap());
        let mut with_list = b[..36].to_vec();
        with_list.extend_from_slice(b"LIST");
        with_list.extend_from_slice(&3u32.to_le_bytes());
        with_list.extend_from_slice(&[1, 2, 3, 0]);
        with_list.extend_from_slice(&b[36..]);
        assert_eq!(decode_wav(&with_list).unwrap().samples, vec![0.5, -0.5]);
    }

    proptest! {
        #[test]
        fn read_of_write_is_quantisation(xs in proptest::collection::vec(-1.0f64..1.0, 0..200)) {
            let w = Waveform::new(xs.clone(), 16000).unwrap();
            let back = decode_wav(&encode_wav(&w)).unwrap();
            for (a, b) in back.samples.iter().zip(&xs) {
                prop_assert_eq!(*a, quantize16(*b) as f64 / 32768.0);
            }
            // a second trip is exact
            prop_assert_eq!(encode_wav(&back), encode_wav(&w));
        }
    }

    #[test]
    fn resample_identity_and_length() {
        let w = Waveform::new(sine(440.0, 44100, 44100, 0.5), 44100).unwrap();
        assert_eq!(resample(&w, 44100), w);
        assert_eq!(resample(&w, 16000).len(), 16000);
    }

    fn peak_bin(x: &[f64]) -> usize {
        use rustfft::{num_complex::Complex, FftPlanner};
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(x.len()).process(&mut buf);
        (0..x.len() / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap()
    }

    fn snr_db(reference: &[f64], test: &[f64]) -> f64 {
        let s: f64 = reference.iter().map(|v| v * v).sum();
        let e: f64 = reference.iter().zip(test).map(|(a, b)| (a - b) * (a - b)).sum();
        10.0 * (s / e).log10()
    }

    #[test]
    fn resampled_tone_keeps_its_frequency() {
        let w = Waveform::new(sine(440.0, 44100, 44100, 0.5), 44100).unwrap();
        assert_eq!(peak_bin(&w.samples), 440);
        let r = resample(&w, 16000);
        // 1 s at 16 kHz: bin spacing 1 Hz
        assert!((peak_bin(&r.samples) as i64 - 440).abs() <= 1);
    }

    #[test]
    fn up_down_round_trip_snr() {
        for f in [100.0, 1000.0, 3000.0, 3900.0] {
            let w = Waveform::new(sine(f, 16000, 16000, 0.5), 16000).unwrap();
            let back = resample(&resample(&w, 32000), 16000);
            assert_eq!(back.len(), w.len());
            let snr = snr_db(&w.samples, &back.samples);
            assert!(snr >= 40.0, "{f} Hz: {snr:.1} dB");
        }
    }

    #[test]
    fn emodb_names() {
        assert_eq!(parse_emodb_name("03a01Wa.wav").unwrap(), ("03".to_string(), EmotionLabel::Anger));
        assert_eq!(parse_emodb_name("16b10Nb.wav").unwrap().1, EmotionLabel::Neutral);
        assert!(matches!(parse_emodb_name("xx"), Err(AudioError::BadFileName(_))));
        assert!(matches!(
            parse_emodb_name("03a01Qa.wav"),
            Err(AudioError::UnknownEmotion { letter: 'Q', .. })
        ));
    }

    #[test]
    fn label_codes_follow_declaration_order() {
        for (i, l) in EmotionLabel::ALL.iter().enumerate() {
            assert_eq!(l.code(), i);
            assert_eq!(EmotionLabel::from_emodb_letter(l.emodb_letter()), Some(*l));
            assert_eq!(l.name().parse::<EmotionLabel>().unwrap(), *l);
        }
    }

    #[test]
    fn bessel_matches_known_values() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_i0(1.0) - 1.2660658777520082).abs() < 1e-14);
        assert!((bessel_i0(8.6) / 750.4611595631659 - 1.0).abs() < 1e-13);
    }
}
