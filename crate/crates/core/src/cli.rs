//! Command-line front end. Exit status: 0 on success, 2 on configuration
//! errors, 1 on any other failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{ConfigError, PipelineConfig, PsoSettings, TunerMode, TunerSettings};
use crate::diffusion::{Architecture, Checkpoint, LayerId, TrainConfig};
use crate::eval::ClassifierSpec;
use crate::features::{FinetuneConfig, ProbeConfig, ProbeReport};
use crate::pipeline::{
    build_tuner, feature_paths, layer_features, load_dataset, read_features, read_json,
    rerun_from_manifest, run_pipeline, stage_classify, stage_extract, stage_finetune,
    stage_preprocess, stage_probe, stage_select, stage_synth, stage_train, write_features,
    write_json, PsoReport, StageError, MANIFEST_FILE, REPORT_FILE,
};
use crate::traffic::{PrepConfig, Split, SynthSpec};

#[derive(Debug, Parser)]
#[command(name = "dmlite", version, about = "Encrypted IoT traffic classification with diffusion features and swarm feature selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic pcap corpus.
    Synth {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        flows: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn `<root>/<class>/*.pcap` into IDX train/test images.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 784)]
        bytes: usize,
        #[arg(long, default_value_t = 0.8)]
        split: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Merge both directions of a connection into one flow.
        #[arg(long)]
        session: bool,
        /// Use transport payloads instead of whole IP packets.
        #[arg(long)]
        payload_only: bool,
    },
    /// Train the denoiser on a preprocessed dataset.
    TrainDdpm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 500)]
        timesteps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.05)]
        wd: f64,
        #[arg(long, default_value_t = 64)]
        embed_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "model.dmlt")]
        out: PathBuf,
    },
    /// Score every feature layer with a cross-validated k-NN probe.
    Probe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 50)]
        t_ex: usize,
        /// Seed of the extraction noise.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value = "probe.json")]
        report: PathBuf,
    },
    /// Contrastively fine-tune one layer on representative samples.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// A layer name or `auto` to probe first.
        #[arg(long, default_value = "auto")]
        layer: String,
        #[arg(long, default_value_t = 0.05)]
        ratio: f64,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-6)]
        lr: f64,
        #[arg(long, default_value_t = 1e-2)]
        wd: f64,
        #[arg(long, default_value_t = 0.07)]
        temperature: f64,
        #[arg(long, default_value_t = 50)]
        t_ex: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "model-ft.dmlt")]
        out: PathBuf,
        #[arg(long, default_value = "finetune.json")]
        report: PathBuf,
    },
    /// Extract (fused) features for both splits.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// A layer name, or `auto` to take the best layer of `--probe`.
        #[arg(long)]
        layer: String,
        #[arg(long)]
        probe: Option<PathBuf>,
        /// Only the layer itself, without its neighbours.
        #[arg(long)]
        single: bool,
        #[arg(long, default_value_t = 50)]
        t_ex: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "features")]
        out: PathBuf,
    },
    /// Search a feature mask with the tuned binary swarm.
    SelectFeatures(SelectArgs),
    /// Train the final classifier on masked features and score the test split.
    Classify {
        /// Directory holding `{train,test}-{features,labels}.idx`.
        #[arg(long)]
        features: PathBuf,
        /// Dataset directory, for class names.
        #[arg(long)]
        data: PathBuf,
        /// A `pso.json` report; all features are used without one.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ClassifierKind::Knn)]
        classifier: ClassifierKind,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
        #[arg(long, default_value_t = 500)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Program and arguments of an external classifier.
        #[arg(long, num_args = 1.., allow_hyphen_values = true)]
        command: Vec<String>,
        #[arg(long, default_value = REPORT_FILE)]
        report: PathBuf,
    },
    /// Run every stage end to end.
    Pipeline {
        #[arg(long, conflicts_with = "manifest")]
        config: Option<PathBuf>,
        /// Repeat the run recorded in a manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, conflicts_with = "manifest")]
        epochs: Option<usize>,
        #[arg(long, conflicts_with = "manifest")]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Feature matrix (`*-features.idx`).
    #[arg(long)]
    features: PathBuf,
    /// Labels; defaults to the sibling `*-labels.idx`.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 0.0)]
    mu: f64,
    #[arg(long, default_value_t = 10)]
    particles: usize,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    #[arg(long, default_value_t = 4)]
    subsets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = TunerArg::Off)]
    tuner: TunerArg,
    /// Mock replies, one per line.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long)]
    url: Option<String>,
    #[arg(long, default_value = "deepseek-chat")]
    model: String,
    #[arg(long, default_value = "pso.json")]
    report: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ClassifierKind {
    Knn,
    LinearSoftmax,
    External,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TunerArg {
    Off,
    Mock,
    Http,
}

#[derive(Debug)]
pub struct CliError {
    pub config: bool,
    pub message: String,
}

impl From<StageError> for CliError {
    fn from(e: StageError) -> Self {
        CliError {
            config: e.is_config(),
            message: e.to_string(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        StageError::from(e).into()
    }
}

fn stage<T, E: Into<StageError>>(r: Result<T, E>) -> Result<T, CliError> {
    r.map_err(|e| CliError::from(e.into()))
}

fn parse_layer(name: &str, probe: Option<&Path>) -> Result<LayerId, CliError> {
    if name == "auto" {
        let path = probe.ok_or_else(|| ConfigError("--layer auto needs --probe".into()))?;
        let report: ProbeReport = read_json(path)?;
        return Ok(report.best);
    }
    Ok(stage(name.parse::<LayerId>())?)
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth { classes, flows, seed, out } => {
            let files = stage_synth(&SynthSpec { classes, flows_per_class: flows, seed }, &out)?;
            println!("wrote {} captures under {}", files.len(), out.display());
        }
        Command::Preprocess { input, out, bytes, split, seed, session, payload_only } => {
            let side = (bytes as f64).sqrt().round() as usize;
            if side * side != bytes {
                return Err(ConfigError(format!("--bytes {bytes} is not a square")).into());
            }
            let prep = PrepConfig {
                bytes,
                width: side,
                height: side,
                split,
                seed,
                session,
                headers: !payload_only,
            };
            let info = stage_preprocess(&input, &out, &prep)?;
            println!(
                "{} classes, {} train / {} test images in {}",
                info.class_names.len(),
                info.train,
                info.test,
                out.display()
            );
        }
        Command::TrainDdpm { data, epochs, batch, timesteps, lr, wd, embed_dim, seed, out } => {
            let (info, train_set) = load_dataset(&data, Split::Train)?;
            let arch = Architecture {
                embed_dim,
                image_size: info.config.width,
                ..Architecture::default()
            };
            let cfg = TrainConfig {
                epochs,
                batch_size: batch,
                timesteps,
                lr,
                weight_decay: wd,
                seed,
                checkpoint_every: None,
            };
            let (ck, report) = stage_train(&train_set, arch, &cfg)?;
            stage(ck.save(&out))?;
            println!(
                "{} steps, final epoch loss {:?}, saved {}",
                report.steps,
                report.epoch_losses.last(),
                out.display()
            );
        }
        Command::Probe { model, data, t_ex, seed, k, folds, report } => {
            let ck = stage(Checkpoint::load(&model))?;
            let (_, train_set) = load_dataset(&data, Split::Train)?;
            let layers = layer_features(&ck, &train_set, t_ex, seed)?;
            let probe = stage_probe(&layers, &ProbeConfig { k, folds, seed })?;
            write_json(&report, &probe)?;
            for s in &probe.scores {
                println!("{:<10} {:.4}", s.layer.to_string(), s.accuracy);
            }
            println!("best layer: {}", probe.best);
        }
        Command::Finetune {
            model, data, layer, ratio, epochs, lr, wd, temperature, t_ex, seed, out, report,
        } => {
            let ck = stage(Checkpoint::load(&model))?;
            let (_, train_set) = load_dataset(&data, Split::Train)?;
            let layers = layer_features(&ck, &train_set, t_ex, seed)?;
            let best = if layer == "auto" {
                stage_probe(&layers, &ProbeConfig { seed, ..ProbeConfig::default() })?.best
            } else {
                parse_layer(&layer, None)?
            };
            let cfg = FinetuneConfig {
                epochs,
                lr,
                weight_decay: wd,
                temperature,
                t_ex,
                seed,
                noise_seed: seed,
                ..FinetuneConfig::default()
            };
            let (tuned, summary) = stage_finetune(&ck, &train_set, &layers[&best], best, ratio, seed, &cfg)?;
            stage(tuned.save(&out))?;
            write_json(&report, &summary)?;
            println!(
                "fine-tuned {best} on {} samples; intra-class cosine {:.6} -> {:.6}",
                summary.representatives.len(),
                summary.intra_cosine_before,
                summary.intra_cosine_after
            );
        }
        Command::Extract { model, data, layer, probe, single, t_ex, seed, out } => {
            let ck = stage(Checkpoint::load(&model))?;
            let best = parse_layer(&layer, probe.as_deref())?;
            for (split, noise) in [(Split::Train, seed), (Split::Test, seed.wrapping_add(1))] {
                let (_, set) = load_dataset(&data, split)?;
                let matrix = if single {
                    let mut all = layer_features(&ck, &set, t_ex, noise)?;
                    all.remove(&best).expect("every layer extracted")
                } else {
                    let fused = stage_extract(&ck, &set, t_ex, noise, best)?;
                    write_json(&out.join("fusion.json"), &fused.components)?;
                    fused.matrix
                };
                let (fp, lp) = feature_paths(&out, split);
                write_features(&fp, &lp, &matrix)?;
                println!("{}: {} x {} -> {}", split.as_str(), matrix.n(), matrix.dim(), fp.display());
            }
        }
        Command::SelectFeatures(a) => {
            let labels = match a.labels {
                Some(l) => l,
                None => {
                    let name = a.features.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                    if !name.contains("features") {
                        return Err(ConfigError("--labels is required when the feature file name has no 'features'".into()).into());
                    }
                    a.features.with_file_name(name.replace("features", "labels"))
                }
            };
            let m = read_features(&a.features, &labels)?;
            let settings = PsoSettings {
                particles: a.particles,
                iters: a.iters,
                subsets: a.subsets,
                lambda: a.lambda,
                mu: a.mu,
                ..PsoSettings::default()
            };
            let tuner_settings = TunerSettings {
                mode: match a.tuner {
                    TunerArg::Off => TunerMode::Off,
                    TunerArg::Mock => TunerMode::Mock,
                    TunerArg::Http => TunerMode::Http,
                },
                url: a.url,
                model: a.model,
                script: a.script,
                ..TunerSettings::default()
            };
            let audit = a.report.with_extension("audit.jsonl");
            let mut tuner = build_tuner(&tuner_settings, Some(&audit))?;
            let report = stage_select(&m, &settings, a.seed, a.seed.wrapping_add(1), tuner.as_mut())?;
            write_json(&a.report, &report)?;
            println!(
                "selected {} of {} features, fitness {:.4}",
                report.selected, report.dim, report.best.value
            );
        }
        Command::Classify {
            features, data, mask, classifier, k, lr, epochs, seed, command, report,
        } => {
            let (tf, tl) = feature_paths(&features, Split::Train);
            let (ef, el) = feature_paths(&features, Split::Test);
            let train = read_features(&tf, &tl)?;
            let test = read_features(&ef, &el)?;
            let mask = match mask {
                Some(p) => read_json::<PsoReport>(&p)?.mask,
                None => vec![true; train.dim()],
            };
            let spec = match classifier {
                ClassifierKind::Knn => ClassifierSpec::Knn { k },
                ClassifierKind::LinearSoftmax => ClassifierSpec::LinearSoftmax { lr, epochs, seed },
                ClassifierKind::External => ClassifierSpec::ExternalGbdt { command },
            };
            let (info, _) = load_dataset(&data, Split::Test)?;
            let metrics = stage_classify(&spec, &train, &test, &mask, &info.class_names)?;
            write_json(&report, &metrics.rounded())?;
            println!(
                "accuracy {:.4}, weighted F1 {:.4}",
                metrics.accuracy, metrics.weighted_f1
            );
        }
        Command::Pipeline { config, manifest, epochs, seed, out } => {
            let outcome = if let Some(m) = manifest {
                rerun_from_manifest(&m, &out)
            } else {
                let mut cfg = match config {
                    Some(p) => PipelineConfig::load(&p)?,
                    None => PipelineConfig::default(),
                };
                if let Some(e) = epochs {
                    cfg.epochs = e;
                }
                if let Some(s) = seed {
                    cfg.seed = s;
                }
                run_pipeline(&cfg, &out)
            };
            let outcome = outcome.map_err(|e| CliError {
                config: e.source.is_config(),
                message: format!(
                    "stage {} failed: {} (manifest so far: {})",
                    e.stage,
                    e.source,
                    out.join(MANIFEST_FILE).display()
                ),
            })?;
            let m = &outcome.report.metrics;
            println!(
                "accuracy {:.4}, weighted F1 {:.4}, {} of {} features, best layer {}",
                m.accuracy,
                m.weighted_f1,
                outcome.report.selected_features,
                outcome.report.total_features,
                outcome.report.best_layer
            );
            println!("report: {}", out.join(REPORT_FILE).display());
        }
    }
    Ok(())
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(if e.config { 2 } else { 1 })
        }
    }
}
