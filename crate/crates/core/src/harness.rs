//! Stratified k-fold evaluation, confusion matrices, and the end-to-end
//! ingest → augment → features → train → report pipeline.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ser_neural::Tensor;
use thiserror::Error;

use crate::adcrnn::{self, AdcrnnConfig, AdcrnnError, Example, LossConfig, LossVariant, TrainConfig, Trained};
use crate::audio::{self, AudioError, EmotionLabel, UtteranceRecord, Waveform, CANONICAL_SR};
use crate::augment::{self, AugmentError, AugmentMethod};
use crate::gan::{self, GanError, GanSpec, GanTrainConfig, Generators};
use crate::spectral::{self, Crop, FeatureConfig, SpectralError};

/// Utterance counts per class of the Berlin corpus, in label-code order.
pub const EMODB_CENSUS: [usize; 7] = [127, 81, 46, 69, 71, 62, 79];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("invalid pipeline setting: {0}")]
    Invalid(String),
    #[error("need at least {needed} items to split into {needed} folds, got {found}")]
    TooFewItems { needed: usize, found: usize },
    #[error("dataset directory {0} holds no usable recordings")]
    EmptyDataset(PathBuf),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Model(#[from] AdcrnnError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified, seeded k-fold split over item indices.
///
/// Each class is shuffled and dealt round-robin, continuing from where the
/// previous class stopped, so per-class and total fold sizes differ by at most one.
pub fn split_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<FoldSplit>, HarnessError> {
    if k < 2 || labels.len() < k {
        return Err(HarnessError::TooFewItems {
            needed: k.max(2),
            found: labels.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut tests = vec![Vec::new(); k];
    let mut cursor = 0;
    for (label, mut items) in by_class {
        if items.len() < k {
            log::warn!("class {label} has {} items, fewer than {k} folds", items.len());
        }
        items.shuffle(&mut rng);
        for i in items {
            tests[cursor % k].push(i);
            cursor += 1;
        }
    }
    Ok(tests
        .into_iter()
        .enumerate()
        .map(|(fold, mut test)| {
            test.sort_unstable();
            let train = (0..labels.len()).filter(|i| test.binary_search(i).is_err()).collect();
            FoldSplit { fold, train, test }
        })
        .collect())
}

/// Counts with rows = ground truth and columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_pairs(classes: usize, truth: &[usize], predicted: &[usize]) -> Self {
        assert_eq!(truth.len(), predicted.len(), "one prediction per item");
        let mut m = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            m.counts[t][p] += 1;
        }
        m
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }

    /// Row-normalised diagonal; `None` for classes absent from the truth.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

pub fn confusion(classes: usize, truth: &[usize], predicted: &[usize]) -> ConfusionMatrix {
    ConfusionMatrix::from_pairs(classes, truth, predicted)
}

/// Mean and population standard deviation.
pub fn aggregate(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_items: usize,
    pub synthetic_items: usize,
    pub test_items: usize,
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub final_loss: Option<f64>,
}

impl FoldReport {
    pub fn new(fold: usize, train_items: usize, synthetic_items: usize, confusion: ConfusionMatrix, final_loss: Option<f64>) -> Self {
        FoldReport {
            fold,
            train_items,
            synthetic_items,
            test_items: confusion.total() as usize,
            accuracy: confusion.accuracy(),
            per_class_accuracy: confusion.per_class_accuracy(),
            confusion,
            final_loss,
        }
    }
}

/// Train on each fold's training part and score its test part.
///
/// `classes` is the label-space size; examples carry label indices below it.
/// `on_fold` sees each fold's split and trained model (for checkpointing).
pub fn cross_validate(
    examples: &[Example],
    classes: usize,
    folds: usize,
    model: &AdcrnnConfig,
    train: &TrainConfig,
    mut on_fold: impl FnMut(&FoldSplit, &Trained, &TrainConfig) -> Result<(), HarnessError>,
) -> Result<Vec<FoldReport>, HarnessError> {
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let mut out = Vec::new();
    for split in split_kfold(&labels, folds, train.seed)? {
        let tr: Vec<Example> = split.train.iter().map(|&i| examples[i].clone()).collect();
        let cfg = TrainConfig {
            seed: derive_seed(train.seed, 100 + split.fold as u64),
            ..train.clone()
        };
        let trained = adcrnn::train(model, &tr, &cfg, |_, _| {})?;
        on_fold(&split, &trained, &cfg)?;
        let xs: Vec<Tensor> = split.test.iter().map(|&i| examples[i].features.clone()).collect();
        let pred: Vec<usize> = adcrnn::predict_many(&trained.model, &xs)?.into_iter().map(|p| p.0).collect();
        let truth: Vec<usize> = split.test.iter().map(|&i| labels[i]).collect();
        out.push(FoldReport::new(
            split.fold,
            tr.len(),
            0,
            confusion(classes, &truth, &pred),
            trained.trace.last().copied(),
        ));
    }
    Ok(out)
}

/// Independent stream seeds derived from one run seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The five augmentation cases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    None,
    TimeShift,
    PitchShift,
    Wavegan,
    Specgan,
}

impl Case {
    pub const ALL: [Case; 5] = [Case::None, Case::TimeShift, Case::PitchShift, Case::Wavegan, Case::Specgan];

    pub fn number(self) -> usize {
        Self::ALL.iter().position(|c| *c == self).unwrap() + 1
    }

    pub fn title(self) -> &'static str {
        match self {
            Case::None => "Without using the HDA methods",
            Case::TimeShift => "Using the time shifting",
            Case::PitchShift => "Using the pitch shifting",
            Case::Wavegan => "Using the WaveGAN",
            Case::Specgan => "Using the SpecGAN",
        }
    }

    pub fn method(self) -> Option<AugmentMethod> {
        match self {
            Case::None => None,
            Case::TimeShift => Some(AugmentMethod::TimeShift),
            Case::PitchShift => Some(AugmentMethod::PitchShift),
            Case::Wavegan => Some(AugmentMethod::Wavegan),
            Case::Specgan => Some(AugmentMethod::Specgan),
        }
    }
}

impl FromStr for Case {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "none" | "original" | "1" => Case::None,
            "time_shift" | "time" | "2" => Case::TimeShift,
            "pitch_shift" | "pitch" | "3" => Case::PitchShift,
            "wavegan" | "4" => Case::Wavegan,
            "specgan" | "5" => Case::Specgan,
            _ => return Err(HarnessError::Invalid(format!("unknown case {s:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Toy,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Directory of EmoDB-named WAV files.
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub case: Case,
    pub loss: LossVariant,
    pub epsilon: f64,
    pub seed: u64,
    pub epochs: usize,
    pub scale: Scale,
    pub folds: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gan_steps: usize,
    pub gan_model_size: usize,
    pub gan_batch: usize,
}

impl PipelineConfig {
    pub fn new(dataset: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            dataset: dataset.into(),
            out: out.into(),
            case: Case::None,
            loss: LossVariant::Lf1,
            epsilon: 0.1,
            seed: 0,
            epochs: 50,
            scale: Scale::Full,
            folds: 5,
            batch_size: 16,
            lr: 1e-4,
            gan_steps: 2000,
            gan_model_size: 16,
            gan_batch: 16,
        }
    }

    /// Parse `key = value` lines; `#` starts a comment. Relative paths are
    /// resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, HarnessError> {
        let mut map: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| HarnessError::Config { line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            let k = k.trim().to_string();
            if map.insert(k.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(err(format!("duplicate key {k:?}")));
            }
        }
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let (_, dataset) = map
            .remove("dataset")
            .ok_or_else(|| HarnessError::Invalid("missing key dataset".into()))?;
        let (_, out) = map.remove("out").ok_or_else(|| HarnessError::Invalid("missing key out".into()))?;
        let mut cfg = PipelineConfig::new(path(&dataset), path(&out));
        for (key, (line, v)) in map {
            let bad = |msg: String| HarnessError::Config { line, msg };
            let num = |v: &str| v.parse::<usize>().map_err(|e| bad(format!("{key}: {e}")));
            let real = |v: &str| v.parse::<f64>().map_err(|e| bad(format!("{key}: {e}")));
            match key.as_str() {
                "case" => cfg.case = v.parse().map_err(|e: HarnessError| bad(e.to_string()))?,
                "loss" => cfg.loss = v.parse().map_err(|e: AdcrnnError| bad(e.to_string()))?,
                "epsilon" => cfg.epsilon = real(&v)?,
                "seed" => cfg.seed = v.parse().map_err(|e| bad(format!("seed: {e}")))?,
                "epochs" => cfg.epochs = num(&v)?,
                "folds" => cfg.folds = num(&v)?,
                "batch_size" => cfg.batch_size = num(&v)?,
                "lr" => cfg.lr = real(&v)?,
                "gan_steps" => cfg.gan_steps = num(&v)?,
                "gan_model_size" => cfg.gan_model_size = num(&v)?,
                "gan_batch" => cfg.gan_batch = num(&v)?,
                "scale" => {
                    cfg.scale = match v.as_str() {
                        "toy" => Scale::Toy,
                        "full" => Scale::Full,
                        _ => return Err(bad(format!("scale must be toy or full, got {v:?}"))),
                    }
                }
                _ => return Err(bad(format!("unknown key {key:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.loss_config().validate()?;
        if self.folds < 2 || self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(HarnessError::Invalid(
                "folds >= 2, epochs >= 1, batch_size >= 1 and lr > 0 are required".into(),
            ));
        }
        if matches!(self.case, Case::Wavegan | Case::Specgan) && (self.gan_steps == 0 || self.gan_model_size == 0 || self.gan_batch == 0) {
            return Err(HarnessError::Invalid("GAN cases need positive gan_steps, gan_model_size and gan_batch".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            epsilon: self.epsilon,
            ..LossConfig::new(self.loss)
        }
    }

    pub fn model_config(&self) -> AdcrnnConfig {
        match self.scale {
            Scale::Toy => AdcrnnConfig::toy(7),
            Scale::Full => AdcrnnConfig::full(7),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub case: Case,
    pub case_number: usize,
    pub method: String,
    pub loss: LossVariant,
    pub loss_description: String,
    pub epsilon: f64,
    pub seed: u64,
    pub epochs: usize,
    pub scale: Scale,
    pub classes: Vec<EmotionLabel>,
    pub folds: Vec<FoldReport>,
    pub pooled: ConfusionMatrix,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

impl RunReport {
    pub fn assemble(cfg: &PipelineConfig, folds: Vec<FoldReport>) -> Self {
        let mut pooled = ConfusionMatrix::new(7);
        for f in &folds {
            pooled.merge(&f.confusion);
        }
        let accs: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
        let (mean, std) = aggregate(&accs);
        RunReport {
            case: cfg.case,
            case_number: cfg.case.number(),
            method: cfg.case.title().to_string(),
            loss: cfg.loss,
            loss_description: cfg.loss.describe().to_string(),
            epsilon: cfg.epsilon,
            seed: cfg.seed,
            epochs: cfg.epochs,
            scale: cfg.scale,
            classes: EmotionLabel::ALL.to_vec(),
            folds,
            pooled,
            mean_accuracy: mean,
            std_accuracy: std,
        }
    }

    /// Plain-text summary: a case/method/accuracy row, then per-class
    /// accuracies and the pooled confusion matrix.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let method = format!("{} ({})", self.method, self.loss);
        let acc = format!("{:.2} ± {:.2}", 100.0 * self.mean_accuracy, 100.0 * self.std_accuracy);
        let w = method.chars().count().max(6);
        let _ = writeln!(s, "{:<4} | {:<w$} | Accuracy (%)", "Case", "Method");
        let _ = writeln!(s, "{}", "-".repeat(4 + w + 22));
        let _ = writeln!(s, "{:<4} | {:<w$} | {}", self.case_number, method, acc);
        let _ = writeln!(s);
        let _ = writeln!(s, "Fold accuracies (%):");
        for f in &self.folds {
            let _ = writeln!(s, "  fold {}: {:.2} ({} test items)", f.fold + 1, 100.0 * f.accuracy, f.test_items);
        }
        let _ = writeln!(s);
        let abbrev = ["An", "Bo", "Di", "Fe", "Ha", "Sa", "Ne"];
        let _ = writeln!(s, "Pooled confusion matrix (rows: truth, columns: prediction):");
        let _ = write!(s, "    ");
        for a in abbrev {
            let _ = write!(s, "{a:>6}");
        }
        let _ = writeln!(s, "{:>9}", "Acc (%)");
        let per = self.pooled.per_class_accuracy();
        for (i, row) in self.pooled.counts.iter().enumerate() {
            let _ = write!(s, "{:<4}", abbrev[i]);
            for c in row {
                let _ = write!(s, "{c:>6}");
            }
            match per[i] {
                Some(a) => {
                    let _ = writeln!(s, "{:>9.2}", 100.0 * a);
                }
                None => {
                    let _ = writeln!(s, "{:>9}", "-");
                }
            }
        }
        s
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

/// Ingest a directory and fail if nothing usable was found.
pub fn ingest(dir: &Path) -> Result<Vec<UtteranceRecord>, HarnessError> {
    let ing = audio::ingest_emodb(dir)?;
    if ing.records.is_empty() {
        return Err(HarnessError::EmptyDataset(dir.to_path_buf()));
    }
    Ok(ing.records)
}

/// Log-mel features of one canonical waveform, centre-cropped or padded to the model length.
pub fn features_for(samples: &[f64], frames: usize) -> Result<Tensor, HarnessError> {
    let fc = FeatureConfig {
        frames,
        ..FeatureConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(spectral::melspec_3d(samples, &fc, Crop::Center, &mut rng)?)
}

fn train_generators(
    cfg: &PipelineConfig,
    fold: usize,
    train: &[UtteranceRecord],
    waves: &HashMap<String, Waveform>,
    dir: &Path,
) -> Result<Generators, HarnessError> {
    let family = if cfg.case == Case::Wavegan {
        GanSpec::wavegan(cfg.gan_model_size)
    } else {
        GanSpec::specgan(cfg.gan_model_size)
    };
    let counts = audio::class_counts(train);
    let target = *counts.iter().max().unwrap();
    let mut gens = Generators::new();
    for label in EmotionLabel::ALL {
        if counts[label.code()] >= target {
            continue;
        }
        let audio: Vec<Vec<f64>> = train
            .iter()
            .filter(|r| r.label == label)
            .map(|r| waves[&r.id].samples.clone())
            .collect();
        let tc = GanTrainConfig {
            steps: cfg.gan_steps,
            batch_size: cfg.gan_batch,
            seed: derive_seed(cfg.seed, 1000 * (fold as u64 + 1) + label.code() as u64),
            ..GanTrainConfig::default()
        };
        log::info!("fold {}: training {:?} generator for {label}", fold + 1, family.family);
        let trained = gan::train_gan(family, &audio, &tc, |_| true)?;
        gan::save_gan(dir.join(label.name()), &trained.gan, trained.norm.as_ref(), Some(label), Some(&tc))?;
        gens.insert(label, (trained.gan, trained.norm));
    }
    Ok(gens)
}

/// Run one configured experiment and write its artifacts under `cfg.out`:
/// `catalog.csv`, per-fold catalogs, augmented audio and model checkpoints,
/// `report.json` and `report.txt`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    let out = &cfg.out;
    fs::create_dir_all(out)?;
    let records = ingest(&cfg.dataset)?;
    audio::write_catalog(&records, out.join("catalog.csv"))?;
    let model_cfg = cfg.model_config();
    let frames = model_cfg.input[0];

    let mut waves = HashMap::new();
    let mut feats = HashMap::new();
    for r in &records {
        let w = audio::load_canonical(&r.path)?;
        feats.insert(r.id.clone(), features_for(&w.samples, frames)?);
        waves.insert(r.id.clone(), w);
    }

    let labels: Vec<usize> = records.iter().map(|r| r.label.code()).collect();
    let splits = split_kfold(&labels, cfg.folds, cfg.seed)?;
    let mut reports = Vec::new();
    for split in &splits {
        let fold_dir = out.join(format!("fold{}", split.fold + 1));
        let train: Vec<UtteranceRecord> = split.train.iter().map(|&i| records[i].clone()).collect();
        let test: Vec<UtteranceRecord> = split.test.iter().map(|&i| records[i].clone()).collect();

        // synthetic items come only from this fold's training utterances
        let mut synthetic = Vec::new();
        if let Some(method) = cfg.case.method() {
            let plan = augment::plan_balance(&train, method, derive_seed(cfg.seed, split.fold as u64 + 1))?;
            let aug_dir = fold_dir.join("augmented");
            synthetic = match method {
                AugmentMethod::TimeShift | AugmentMethod::PitchShift => augment::execute_plan(&plan, &train, &aug_dir)?,
                AugmentMethod::Wavegan | AugmentMethod::Specgan => {
                    let gens = train_generators(cfg, split.fold, &train, &waves, &fold_dir.join("gan"))?;
                    gan::execute_gan_plan(&plan, &train, &gens, &aug_dir)?
                }
            };
        }
        let mut train_catalog = train.clone();
        train_catalog.extend(synthetic.iter().cloned());
        audio::write_catalog(&train_catalog, fold_dir.join("train_catalog.csv"))?;
        audio::write_catalog(&test, fold_dir.join("test_catalog.csv"))?;

        let mut examples: Vec<Example> = train
            .iter()
            .map(|r| Example {
                features: feats[&r.id].clone(),
                label: r.label.code(),
            })
            .collect();
        for r in &synthetic {
            let w = audio::load_canonical(&r.path)?;
            examples.push(Example {
                features: features_for(&w.samples, frames)?,
                label: r.label.code(),
            });
        }
        let tc = TrainConfig {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            seed: derive_seed(cfg.seed, 100 + split.fold as u64),
            loss: cfg.loss_config(),
        };
        let fold_no = split.fold + 1;
        let trained = adcrnn::train(&model_cfg, &examples, &tc, |e, l| {
            log::info!("fold {fold_no} epoch {}: loss {l:.4}", e + 1)
        })?;
        adcrnn::save_model(fold_dir.join("model"), &trained.model, trained.centers.as_ref(), tc.seed, Some(&tc))?;

        let xs: Vec<Tensor> = test.iter().map(|r| feats[&r.id].clone()).collect();
        let pred: Vec<usize> = adcrnn::predict_many(&trained.model, &xs)?.into_iter().map(|p| p.0).collect();
        let truth: Vec<usize> = test.iter().map(|r| r.label.code()).collect();
        let report = FoldReport::new(
            split.fold,
            examples.len(),
            synthetic.len(),
            confusion(7, &truth, &pred),
            trained.trace.last().copied(),
        );
        log::info!("fold {fold_no}: accuracy {:.4}", report.accuracy);
        reports.push(report);
    }
    let report = RunReport::assemble(cfg, reports);
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(out.join("report.txt"), report.to_table())?;
    Ok(report)
}

/// Write an EmoDB-style corpus of synthetic voiced utterances with `counts`
/// files per class (label-code order). Each class has its own pitch, so
/// the classes are learnable.
pub fn write_fixture(dir: &Path, counts: [usize; 7], seconds: f64, seed: u64) -> Result<Vec<PathBuf>, HarnessError> {
    const SPEAKERS: [&str; 10] = ["03", "08", "09", "10", "11", "12", "13", "14", "15", "16"];
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut paths = Vec::new();
    let n = (seconds * CANONICAL_SR as f64).round() as usize;
    for label in EmotionLabel::ALL {
        let f0 = 110.0 * 1.25f64.powi(label.code() as i32);
        for i in 0..counts[label.code()] {
            let speaker = SPEAKERS[i % SPEAKERS.len()];
            let text = format!("{}{:02}", if (i / 10) % 2 == 0 { 'a' } else { 'b' }, 1 + (i / 20) % 10);
            let version = (b'a' + (i / 200) as u8) as char;
            let name = format!("{speaker}{text}{}{version}.wav", label.emodb_letter());
            let f = f0 * rng.gen_range(0.95..1.05);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let samples = (0..n)
                .map(|t| {
                    let time = t as f64 / CANONICAL_SR as f64;
                    let env = (std::f64::consts::PI * t as f64 / n as f64).sin();
                    let tone: f64 = (1..=4)
                        .map(|h| (std::f64::consts::TAU * f * h as f64 * time + phase).sin() / h as f64)
                        .sum();
                    0.3 * env * tone + 0.01 * rng.gen_range(-1.0..1.0)
                })
                .collect();
            let path = dir.join(name);
            audio::write_wav(&Waveform::new(samples, CANONICAL_SR)?, &path)?;
            paths.push(path);
        }
    }
    Ok(paths)
}
