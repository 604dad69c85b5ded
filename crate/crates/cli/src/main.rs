use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ser_core::adcrnn::{self, AdcrnnConfig, Example, LossConfig, LossVariant, TrainConfig};
use ser_core::audio::{self, EmotionLabel, Provenance, UtteranceRecord, Waveform, CANONICAL_SR};
use ser_core::augment::{self, AugmentMethod};
use ser_core::gan::{self, GanFamily, GanSpec, GanTrainConfig, Generators};
use ser_core::harness::{self, FoldReport, PipelineConfig, EMODB_CENSUS};
use ser_core::spectral::SpecganNorm;
use ser_neural::{tensor_read, tensor_write};

#[derive(Parser)]
#[command(name = "ser", version, about = "Speech emotion recognition with hybrid data augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Wave,
    Spec,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Toy,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Catalog a directory of EmoDB-named WAV files.
    Ingest {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic EmoDB-style corpus.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        /// Files per class; defaults to the Berlin corpus class census.
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        seconds: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Balance a catalog by synthesising minority-class utterances.
    Augment {
        #[arg(long, value_parser = parse_method)]
        method: AugmentMethod,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory of per-class generator checkpoints (`<dir>/<label>/`), for GAN methods.
        #[arg(long)]
        generators: Option<PathBuf>,
    },
    /// Write one log-mel feature tensor per catalog entry.
    Features {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        frames: usize,
    },
    /// Fit the per-bin spectrogram normalisation used by SpecGAN.
    Specnorm {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one class.
        #[arg(long = "class")]
        label: Option<EmotionLabel>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a WaveGAN or SpecGAN on one class.
    GanTrain {
        #[arg(long, value_enum)]
        family: Family,
        #[arg(long = "class")]
        label: EmotionLabel,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        model_size: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Sample waveforms from a trained generator.
    GanGenerate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cross-validate the classifier on precomputed features.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long, default_value = "lf1")]
        loss: LossVariant,
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, value_enum, default_value = "full")]
        scale: ScaleArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a whole experiment from a key = value config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_method(s: &str) -> Result<AugmentMethod, String> {
    s.parse().map_err(|e: augment::AugmentError| e.to_string())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Ingest { dataset, out } => {
            let ing = audio::ingest_emodb(&dataset)?;
            for (p, e) in &ing.skipped {
                log::warn!("skipped {}: {e}", p.display());
            }
            audio::write_catalog(&ing.records, &out)?;
            println!("{} utterances cataloged to {}", ing.records.len(), out.display());
        }
        Command::Fixture {
            out,
            per_class,
            seconds,
            seed,
        } => {
            let counts = per_class.map(|n| [n; 7]).unwrap_or(EMODB_CENSUS);
            let paths = harness::write_fixture(&out, counts, seconds, seed)?;
            println!("wrote {} files to {}", paths.len(), out.display());
        }
        Command::Augment {
            method,
            input,
            out,
            seed,
            generators,
        } => augment_cmd(method, &input, &out, seed, generators.as_deref())?,
        Command::Features { input, out, frames } => {
            let records = audio::read_catalog(&input)?;
            fs::create_dir_all(&out)?;
            for r in &records {
                let w = audio::load_canonical(&r.path)?;
                tensor_write(&harness::features_for(&w.samples, frames)?, out.join(format!("{}.tensor", r.id)))?;
            }
            println!("wrote {} feature tensors to {}", records.len(), out.display());
        }
        Command::Specnorm {
            input,
            out,
            label,
            seed,
        } => {
            let records = audio::read_catalog(&input)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut slices = Vec::new();
            for r in records.iter().filter(|r| label.is_none_or(|l| r.label == l)) {
                slices.push(gan::random_slice(&audio::load_canonical(&r.path)?.samples, &mut rng));
            }
            if slices.is_empty() {
                bail!("no utterances to fit");
            }
            tensor_write(&SpecganNorm::fit(&slices)?.to_tensor(), &out)?;
            println!("normalisation from {} slices written to {}", slices.len(), out.display());
        }
        Command::GanTrain {
            family,
            label,
            input,
            out,
            steps,
            seed,
            model_size,
            batch_size,
        } => {
            let records = audio::read_catalog(&input)?;
            let mut audio_data = Vec::new();
            for r in records.iter().filter(|r| r.label == label) {
                audio_data.push(audio::load_canonical(&r.path)?.samples);
            }
            let spec = match family {
                Family::Wave => GanSpec::wavegan(model_size),
                Family::Spec => GanSpec::specgan(model_size),
            };
            let cfg = GanTrainConfig {
                steps,
                batch_size,
                seed,
                ..GanTrainConfig::default()
            };
            let trained = gan::train_gan(spec, &audio_data, &cfg, |r| {
                if r.step % 10 == 0 || r.step + 1 == steps {
                    log::info!(
                        "step {}: loss_d {:.4} loss_g {:.4} wasserstein {:.4}",
                        r.step,
                        r.loss_d,
                        r.loss_g,
                        r.wasserstein
                    );
                }
                true
            })?;
            gan::save_gan(&out, &trained.gan, trained.norm.as_ref(), Some(label), Some(&cfg))?;
            fs::write(out.join("trace.json"), serde_json::to_string_pretty(&trained.trace)? + "\n")?;
            println!("checkpoint written to {}", out.display());
        }
        Command::GanGenerate {
            checkpoint,
            count,
            out,
            seed,
        } => {
            let loaded = gan::load_gan(&checkpoint)?;
            let samples = gan::generate_samples(&loaded.gan, loaded.norm.as_ref(), count, seed)?;
            let (tag, provenance) = match loaded.gan.spec.family {
                GanFamily::Wavegan => ("wg", Provenance::Wavegan),
                GanFamily::Specgan => ("sg", Provenance::Specgan),
            };
            let label = loaded.label.context("checkpoint has no class label")?;
            let mut records = Vec::new();
            for (i, s) in samples.into_iter().enumerate() {
                let id = format!("{}_{tag}{i:04}", label.name());
                let path = out.join(format!("{id}.wav"));
                audio::write_wav(&Waveform::new(s, CANONICAL_SR)?, &path)?;
                records.push(UtteranceRecord {
                    id,
                    speaker: String::new(),
                    label,
                    path,
                    provenance,
                });
            }
            audio::write_catalog(&records, out.join("catalog.csv"))?;
            println!("{} samples written to {}", records.len(), out.display());
        }
        Command::Train {
            features,
            catalog,
            loss,
            epsilon,
            folds,
            seed,
            epochs,
            lr,
            scale,
            out,
        } => train_cmd(&features, &catalog, loss, epsilon, folds, seed, epochs, lr, scale, &out)?,
        Command::Run { config } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let base = config.parent().unwrap_or(Path::new("."));
            let cfg = PipelineConfig::parse(&text, base)?;
            let report = harness::run_pipeline(&cfg)?;
            print!("{}", report.to_table());
            println!("\nartifacts in {}", cfg.out.display());
        }
    }
    Ok(())
}

fn augment_cmd(method: AugmentMethod, input: &Path, out: &Path, seed: u64, generators: Option<&Path>) -> Result<()> {
    let records = audio::read_catalog(input)?;
    let plan = augment::plan_balance(&records, method, seed)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("plan.json"), serde_json::to_string_pretty(&plan)? + "\n")?;
    let synthetic = match method {
        AugmentMethod::TimeShift | AugmentMethod::PitchShift => augment::execute_plan(&plan, &records, out)?,
        AugmentMethod::Wavegan | AugmentMethod::Specgan => {
            let dir = generators.context("GAN methods need --generators <dir>")?;
            let mut gens = Generators::new();
            for label in EmotionLabel::ALL {
                let sub = dir.join(label.name());
                if sub.exists() {
                    let g = gan::load_gan(&sub)?;
                    gens.insert(label, (g.gan, g.norm));
                }
            }
            gan::execute_gan_plan(&plan, &records, &gens, out)?
        }
    };
    let n = synthetic.len();
    let mut all = records;
    all.extend(synthetic);
    audio::write_catalog(&all, out.join("catalog.csv"))?;
    println!("{n} synthetic utterances; every class now has {} items", plan.target);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    features: &Path,
    catalog: &Path,
    loss: LossVariant,
    epsilon: f64,
    folds: usize,
    seed: u64,
    epochs: usize,
    lr: f64,
    scale: ScaleArg,
    out: &Path,
) -> Result<()> {
    let records = audio::read_catalog(catalog)?;
    let mut examples = Vec::new();
    for r in &records {
        let t = tensor_read(features.join(format!("{}.tensor", r.id)))
            .with_context(|| format!("features for {}", r.id))?;
        examples.push(Example {
            features: t,
            label: r.label.code(),
        });
    }
    let mut model = match scale {
        ScaleArg::Toy => AdcrnnConfig::toy(7),
        ScaleArg::Full => AdcrnnConfig::full(7),
    };
    if let Some(first) = examples.first() {
        model.input[0] = first.features.shape()[0];
    }
    let cfg = TrainConfig {
        epochs,
        batch_size: 16,
        lr,
        seed,
        loss: LossConfig {
            epsilon,
            ..LossConfig::new(loss)
        },
    };
    let reports: Vec<FoldReport> = harness::cross_validate(&examples, 7, folds, &model, &cfg, |split, trained, tc| {
        let dir = out.join(format!("fold{}", split.fold + 1));
        adcrnn::save_model(&dir, &trained.model, trained.centers.as_ref(), tc.seed, Some(tc))?;
        log::info!("fold {} trained", split.fold + 1);
        Ok(())
    })?;
    let accs: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    let (mean, std) = harness::aggregate(&accs);
    let summary = serde_json::json!({
        "loss": loss,
        "epsilon": epsilon,
        "seed": seed,
        "epochs": epochs,
        "folds": reports,
        "mean_accuracy": mean,
        "std_accuracy": std,
    });
    fs::create_dir_all(out)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("accuracy {:.2} ± {:.2} %", 100.0 * mean, 100.0 * std);
    Ok(())
}
