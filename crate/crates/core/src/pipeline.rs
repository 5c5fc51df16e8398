//! Stage functions and the end-to-end run that chains them.
//!
//! Artifacts of a run directory:
//!
//! | path | written by |
//! |------|-----------|
//! | `corpus/<class>/capture.pcap` | synth (only without a configured corpus) |
//! | `data/{train,test}-{images,labels}.idx`, `data/dataset.json` | preprocess |
//! | `model.dmlt`, `train.json` | train-ddpm |
//! | `probe.json` | probe |
//! | `model-ft.dmlt`, `finetune.json` | finetune |
//! | `features/{train,test}-{features,labels}.idx`, `features/fusion.json` | extract |
//! | `pso.json`, `tuner-audit.jsonl` | select-features |
//! | `report.json` | classify |
//! | `manifest.json` | every run, also on failure |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, PipelineConfig, PsoSettings, TunerMode, TunerSettings};
use crate::diffusion::{
    extract_all_layers, train, Architecture, Checkpoint, DiffusionError, LayerId, TrainConfig,
    TrainReport,
};
use crate::eval::{
    compute_metrics, round4, sha256_file, train_classifier, ClassifierSpec, Digest, EvalError,
    MetricsReport, RunManifest, StageRecord,
};
use crate::features::contrastive::mean_intra_class_cosine;
use crate::features::{
    contrastive_finetune, fuse_features, knn_probe, select_representatives, FeatureError,
    FeatureMatrix, FinetuneConfig, FinetuneReport, FusedFeatures, ProbeConfig, ProbeReport,
    TuneSample,
};
use crate::swarm::{
    build_subsets, run, FitnessReport, IterationMetric, NoopTuner, ParamBounds, ParamTuner,
    PsoConfig, PsoParams, SwarmError,
};
use crate::traffic::dataset::{load_info, load_split, write_dataset, DatasetInfo};
use crate::traffic::{build_dataset, idx, synth_corpus, LabeledImageSet, PrepConfig, Split, SynthSpec, TrafficError};
use crate::tuner::{AuditLog, HttpBackend, LlmTuner, MockBackend, TunerError};

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Traffic(#[from] TrafficError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Swarm(#[from] SwarmError),
    #[error(transparent)]
    Tuner(#[from] TunerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {reason}")]
    Artifact { path: String, reason: String },
}

impl StageError {
    /// Whether the failure stems from the configuration rather than the run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            StageError::Config(_)
                | StageError::Traffic(TrafficError::Config(_))
                | StageError::Diffusion(DiffusionError::Config(_) | DiffusionError::Domain(_))
                | StageError::Swarm(SwarmError::Config(_))
                | StageError::Eval(EvalError::Config(_))
        )
    }

    fn artifact(path: &Path, reason: impl ToString) -> Self {
        StageError::Artifact {
            path: path.display().to_string(),
            reason: reason.to_string(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {source}")]
pub struct PipelineError {
    pub stage: String,
    #[source]
    pub source: StageError,
    pub manifest: Box<RunManifest>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StageError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| StageError::artifact(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable artifact");
    fs::write(path, text + "\n").map_err(|e| StageError::artifact(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StageError> {
    let text = fs::read_to_string(path).map_err(|e| StageError::artifact(path, e))?;
    serde_json::from_str(&text).map_err(|e| StageError::artifact(path, e))
}

/// `<dir>/{split}-features.idx` and `<dir>/{split}-labels.idx`.
pub fn feature_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{}-features.idx", split.as_str())),
        dir.join(format!("{}-labels.idx", split.as_str())),
    )
}

pub fn write_features(features: &Path, labels: &Path, m: &FeatureMatrix) -> Result<(), StageError> {
    idx::write_file(features, &idx::encode_f32_matrix(m.n(), m.dim(), m.data())?)?;
    idx::write_file(labels, &idx::encode_labels(m.labels())?)?;
    Ok(())
}

pub fn read_features(features: &Path, labels: &Path) -> Result<FeatureMatrix, StageError> {
    let (rows, cols, data) = idx::decode_f32_matrix(&idx::read_file(features)?)?;
    let labels = idx::decode_labels(&idx::read_file(labels)?)?;
    if labels.len() != rows {
        return Err(StageError::artifact(
            features,
            format!("{rows} feature rows but {} labels", labels.len()),
        ));
    }
    Ok(FeatureMatrix::new(data, cols, labels, None)?)
}

pub fn stage_synth(spec: &SynthSpec, out: &Path) -> Result<Vec<PathBuf>, StageError> {
    Ok(synth_corpus(spec, out)?)
}

pub fn stage_preprocess(corpus: &Path, data: &Path, prep: &PrepConfig) -> Result<DatasetInfo, StageError> {
    let build = build_dataset(corpus, prep)?;
    Ok(write_dataset(data, &build, prep)?)
}

pub fn stage_train(
    train_set: &LabeledImageSet,
    arch: Architecture,
    config: &TrainConfig,
) -> Result<(Checkpoint, TrainReport), StageError> {
    Ok(train(&train_set.pixels(), arch, config, |_| Ok(()))?)
}

/// Per-layer features of a split plus the noise seed they were drawn with.
pub fn layer_features(
    ck: &Checkpoint,
    set: &LabeledImageSet,
    t_ex: usize,
    noise_seed: u64,
) -> Result<BTreeMap<LayerId, FeatureMatrix>, StageError> {
    Ok(extract_all_layers(
        &ck.net,
        &ck.schedule,
        &set.pixels(),
        &set.labels(),
        t_ex,
        noise_seed,
    )?)
}

pub fn stage_probe(
    layers: &BTreeMap<LayerId, FeatureMatrix>,
    config: &ProbeConfig,
) -> Result<ProbeReport, StageError> {
    Ok(knn_probe(layers, config)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub layer: LayerId,
    /// Training-set rows the contrastive loss was computed on.
    pub representatives: Vec<usize>,
    pub report: FinetuneReport,
    /// Mean same-class cosine of the layer's features on the
    /// representatives, before and after.
    pub intra_cosine_before: f64,
    pub intra_cosine_after: f64,
}

fn rows_f64(m: &FeatureMatrix) -> Vec<Vec<f64>> {
    m.rows().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

/// Picks representatives from `layer_train` (the layer's training-set
/// features), fine-tunes that layer on them and measures the effect.
pub fn stage_finetune(
    ck: &Checkpoint,
    train_set: &LabeledImageSet,
    layer_train: &FeatureMatrix,
    layer: LayerId,
    ratio: f64,
    select_seed: u64,
    config: &FinetuneConfig,
) -> Result<(Checkpoint, FinetuneSummary), StageError> {
    let reps = select_representatives(layer_train, ratio, select_seed)?;
    let samples: Vec<TuneSample<'_>> = reps
        .indices
        .iter()
        .map(|&i| TuneSample {
            pixels: &train_set.images[i].pixels,
            label: train_set.images[i].label,
            noise_index: i,
        })
        .collect();
    let (tuned, report) = contrastive_finetune(ck, &samples, layer, config)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let before = rows_f64(&layer_train.subset(&reps.indices));
    let after_rows: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            let eps = crate::diffusion::extraction_noise::<f32>(config.noise_seed, s.noise_index, s.pixels.len());
            let trace = crate::diffusion::extract::noised_trace(&tuned.net, &tuned.schedule, s.pixels, config.t_ex, &eps)?;
            Ok(trace.pooled(layer).iter().map(|&v| v as f64).collect())
        })
        .collect::<Result<_, DiffusionError>>()?;
    let summary = FinetuneSummary {
        layer,
        representatives: reps.indices.clone(),
        report,
        intra_cosine_before: mean_intra_class_cosine(&before, &labels),
        intra_cosine_after: mean_intra_class_cosine(&after_rows, &labels),
    };
    Ok((tuned, summary))
}

/// Fused features of a split under the given checkpoint.
pub fn stage_extract(
    ck: &Checkpoint,
    set: &LabeledImageSet,
    t_ex: usize,
    noise_seed: u64,
    best: LayerId,
) -> Result<FusedFeatures, StageError> {
    let layers = layer_features(ck, set, t_ex, noise_seed)?;
    Ok(fuse_features(&layers, best)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsoReport {
    pub mask: Vec<bool>,
    pub selected: usize,
    pub dim: usize,
    pub best: FitnessReport,
    pub history: Vec<IterationMetric>,
    pub final_params: PsoParams,
    pub subsets: Vec<Vec<usize>>,
    pub fitness_train: Vec<usize>,
}

pub fn stage_select(
    features: &FeatureMatrix,
    settings: &PsoSettings,
    subset_seed: u64,
    pso_seed: u64,
    tuner: &mut dyn ParamTuner,
) -> Result<PsoReport, StageError> {
    let plan = build_subsets(features, settings.subsets, settings.subset_ratio, settings.train_ratio, subset_seed)?;
    let spec = plan.into_spec(features, settings.lambda, settings.mu)?;
    let config = PsoConfig {
        particles: settings.particles,
        iterations: settings.iters,
        v_max: settings.v_max,
        seed: pso_seed,
    };
    let start = PsoParams {
        w: settings.w,
        c1: settings.c1,
        c2: settings.c2,
    };
    let outcome = run(&spec, &config, start, tuner)?;
    Ok(PsoReport {
        selected: outcome.mask.iter().filter(|&&b| b).count(),
        dim: outcome.mask.len(),
        mask: outcome.mask,
        best: outcome.best,
        history: outcome.history,
        final_params: outcome.final_params,
        subsets: plan.subsets,
        fitness_train: plan.train,
    })
}

pub fn stage_classify(
    spec: &ClassifierSpec,
    train: &FeatureMatrix,
    test: &FeatureMatrix,
    mask: &[bool],
    class_names: &[String],
) -> Result<MetricsReport, StageError> {
    if mask.len() != train.dim() || mask.len() != test.dim() {
        return Err(StageError::Eval(EvalError::Input(format!(
            "mask of width {} for features of width {} / {}",
            mask.len(),
            train.dim(),
            test.dim()
        ))));
    }
    let train = train.select_columns(mask)?;
    let test = test.select_columns(mask)?;
    let classifier = train_classifier(spec, &train)?;
    let predictions = classifier.predict(&test)?;
    Ok(compute_metrics(&predictions, test.labels(), class_names)?)
}

/// Builds the coefficient tuner described by `settings`; the mock and HTTP
/// backends log every call to `audit` when given.
pub fn build_tuner(settings: &TunerSettings, audit: Option<&Path>) -> Result<Box<dyn ParamTuner>, StageError> {
    let open_audit = |path: &Path| -> Result<AuditLog, StageError> {
        if path.exists() {
            fs::remove_file(path).map_err(|e| StageError::artifact(path, e))?;
        }
        Ok(AuditLog::open(path)?)
    };
    Ok(match settings.mode {
        TunerMode::Off => Box::new(NoopTuner),
        TunerMode::Mock => {
            let backend = if !settings.responses.is_empty() {
                MockBackend::new(settings.responses.clone())
            } else if let Some(script) = &settings.script {
                MockBackend::from_file(script)?
            } else {
                log::warn!("mock tuner without responses: coefficients stay fixed");
                MockBackend::new(Vec::new())
            };
            let mut t = LlmTuner::new(backend, ParamBounds::default());
            if let Some(p) = audit {
                t = t.with_audit(open_audit(p)?);
            }
            Box::new(t)
        }
        TunerMode::Http => {
            let url = settings
                .url
                .as_deref()
                .ok_or_else(|| ConfigError("tuner.mode http needs tuner.url".into()))?;
            let backend = HttpBackend::new(
                url,
                &settings.model,
                settings.temperature,
                Duration::from_secs(settings.timeout_secs),
            );
            let mut t = LlmTuner::new(backend, ParamBounds::default());
            if let Some(p) = audit {
                t = t.with_audit(open_audit(p)?);
            }
            Box::new(t)
        }
    })
}

/// The deterministic outcome of a run; timings live in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub metrics: MetricsReport,
    pub best_layer: LayerId,
    pub probe: BTreeMap<String, f64>,
    pub fusion: Vec<LayerId>,
    pub selected_features: usize,
    pub total_features: usize,
    pub pso_best_fitness: f64,
    pub train_samples: usize,
    pub test_samples: usize,
}

impl RunReport {
    /// Pretty JSON with real numbers at four decimals.
    pub fn to_json(&self) -> String {
        let mut r = self.clone();
        r.metrics = r.metrics.rounded();
        r.probe.values_mut().for_each(|v| *v = round4(*v));
        r.pso_best_fitness = round4(r.pso_best_fitness);
        serde_json::to_string_pretty(&r).expect("report serializes") + "\n"
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: RunReport,
    pub manifest: RunManifest,
    pub finetune: FinetuneSummary,
}

pub const REPORT_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";

fn corpus_files(root: &Path) -> Result<Vec<PathBuf>, StageError> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = fs::read_dir(&dir).map_err(|e| StageError::artifact(&dir, e))?;
        for e in entries {
            let p = e.map_err(|e| StageError::artifact(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn digests(root: &Path, files: &[PathBuf]) -> Result<Vec<Digest>, StageError> {
    files
        .iter()
        .map(|p| {
            Ok(Digest {
                path: p.strip_prefix(root).unwrap_or(p).display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

struct Run<'a> {
    out: &'a Path,
    manifest: RunManifest,
}

impl Run<'_> {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T, StageError>) -> Result<T, PipelineError> {
        log::info!("stage {name}");
        let start = Instant::now();
        match f() {
            Ok(v) => {
                self.manifest.stages.push(StageRecord {
                    name: name.to_string(),
                    seconds: start.elapsed().as_secs_f64(),
                });
                Ok(v)
            }
            Err(source) => {
                self.manifest.failed_stage = Some(name.to_string());
                self.manifest.error = Some(source.to_string());
                if let Err(e) = self.manifest.save(&self.out.join(MANIFEST_FILE)) {
                    log::warn!("could not save manifest: {e}");
                }
                Err(PipelineError {
                    stage: name.to_string(),
                    source,
                    manifest: Box::new(self.manifest.clone()),
                })
            }
        }
    }
}

/// Runs every stage into `out` and writes `report.json` and `manifest.json`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineOutcome, PipelineError> {
    let config_json = serde_json::to_value(cfg).expect("config serializes");
    let seeds = cfg.seeds();
    let mut manifest = RunManifest::new(config_json);
    for (k, v) in [
        ("split", seeds.split),
        ("synth", cfg.synth.seed),
        ("ddpm", seeds.ddpm),
        ("noise", seeds.noise),
        ("probe", seeds.probe),
        ("finetune", seeds.finetune),
        ("subsets", seeds.subsets),
        ("pso", seeds.pso),
    ] {
        manifest.seeds.insert(k.to_string(), v);
    }
    let mut run = Run { out, manifest };

    run.stage("config", || {
        cfg.validate()?;
        fs::create_dir_all(out).map_err(|e| StageError::artifact(out, e))?;
        Ok(())
    })?;

    let corpus = match &cfg.corpus {
        Some(c) => c.clone(),
        None => {
            let dir = out.join("corpus");
            run.stage("synth", || stage_synth(&cfg.synth, &dir))?;
            dir
        }
    };
    let inputs = run.stage("digest-inputs", || digests(&corpus, &corpus_files(&corpus)?))?;
    run.manifest.inputs = inputs;

    let data = out.join("data");
    let info = run.stage("preprocess", || stage_preprocess(&corpus, &data, &cfg.prep))?;
    let (train_set, test_set) = run.stage("load-dataset", || {
        Ok((load_split(&data, Split::Train)?, load_split(&data, Split::Test)?))
    })?;

    let arch = Architecture {
        embed_dim: cfg.embed_dim,
        image_size: cfg.prep.width,
        ..Architecture::default()
    };
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        timesteps: cfg.timesteps,
        lr: cfg.lr,
        weight_decay: cfg.wd,
        seed: seeds.ddpm,
        checkpoint_every: None,
    };
    let model_path = out.join("model.dmlt");
    let ck = run.stage("train-ddpm", || {
        if cfg.prep.width != cfg.prep.height {
            return Err(ConfigError("the denoiser needs square images".into()).into());
        }
        let (ck, report) = stage_train(&train_set, arch, &train_cfg)?;
        ck.save(&model_path)?;
        write_json(&out.join("train.json"), &report)?;
        Ok(ck)
    })?;

    let train_noise = seeds.noise;
    let test_noise = seeds.noise.wrapping_add(1);
    let probe_cfg = ProbeConfig {
        k: cfg.probe_k,
        folds: cfg.probe_folds,
        seed: seeds.probe,
    };
    let (layers, probe) = run.stage("probe", || {
        let layers = layer_features(&ck, &train_set, cfg.t_ex, train_noise)?;
        let probe = stage_probe(&layers, &probe_cfg)?;
        write_json(&out.join("probe.json"), &probe)?;
        Ok((layers, probe))
    })?;

    let ft_cfg = FinetuneConfig {
        epochs: cfg.finetune.epochs,
        lr: cfg.finetune.lr,
        weight_decay: cfg.finetune.wd,
        temperature: cfg.finetune.temperature,
        batch_size: cfg.finetune.batch_size,
        t_ex: cfg.t_ex,
        seed: seeds.finetune,
        noise_seed: train_noise,
    };
    let (tuned, finetune) = run.stage("finetune", || {
        let (tuned, summary) = stage_finetune(
            &ck,
            &train_set,
            &layers[&probe.best],
            probe.best,
            cfg.finetune.ratio,
            seeds.finetune,
            &ft_cfg,
        )?;
        tuned.save(&out.join("model-ft.dmlt"))?;
        write_json(&out.join("finetune.json"), &summary)?;
        Ok((tuned, summary))
    })?;
    drop(layers);

    let feat_dir = out.join("features");
    let (train_fused, test_fused) = run.stage("extract", || {
        let tr = stage_extract(&tuned, &train_set, cfg.t_ex, train_noise, probe.best)?;
        let te = stage_extract(&tuned, &test_set, cfg.t_ex, test_noise, probe.best)?;
        for (split, f) in [(Split::Train, &tr), (Split::Test, &te)] {
            let (fp, lp) = feature_paths(&feat_dir, split);
            write_features(&fp, &lp, &f.matrix)?;
        }
        write_json(&feat_dir.join("fusion.json"), &tr.components)?;
        Ok((tr, te))
    })?;

    let pso = run.stage("select-features", || {
        let mut tuner = build_tuner(&cfg.tuner, Some(&out.join("tuner-audit.jsonl")))?;
        let report = stage_select(&train_fused.matrix, &cfg.pso, seeds.subsets, seeds.pso, tuner.as_mut())?;
        write_json(&out.join("pso.json"), &report)?;
        Ok(report)
    })?;

    let metrics = run.stage("classify", || {
        stage_classify(&cfg.classifier, &train_fused.matrix, &test_fused.matrix, &pso.mask, &info.class_names)
    })?;

    let report = RunReport {
        metrics,
        best_layer: probe.best,
        probe: probe.scores.iter().map(|s| (s.layer.to_string(), s.accuracy)).collect(),
        fusion: train_fused.components.clone(),
        selected_features: pso.selected,
        total_features: pso.dim,
        pso_best_fitness: pso.best.value,
        train_samples: train_set.len(),
        test_samples: test_set.len(),
    };
    run.stage("write-report", || {
        let path = out.join(REPORT_FILE);
        fs::write(&path, report.to_json()).map_err(|e| StageError::artifact(&path, e))
    })?;
    let artifacts = run.stage("digest-artifacts", || {
        let mut files: Vec<PathBuf> = corpus_files(out)?
            .into_iter()
            .filter(|p| {
                !p.starts_with(out.join("corpus"))
                    && p.file_name().is_some_and(|n| n != MANIFEST_FILE)
            })
            .collect();
        files.sort();
        digests(out, &files)
    })?;
    run.manifest.artifacts = artifacts;
    let manifest_path = out.join(MANIFEST_FILE);
    run.manifest
        .save(&manifest_path)
        .map_err(|e| PipelineError {
            stage: "write-manifest".into(),
            source: e.into(),
            manifest: Box::new(run.manifest.clone()),
        })?;
    Ok(PipelineOutcome {
        report,
        manifest: run.manifest,
        finetune,
    })
}

/// Repeats the run recorded in `manifest` into `out` and checks that the
/// inputs hash as recorded.
pub fn rerun_from_manifest(manifest: &Path, out: &Path) -> Result<PipelineOutcome, PipelineError> {
    let fail = |source: StageError| PipelineError {
        stage: "load-manifest".into(),
        source,
        manifest: Box::new(RunManifest::new(serde_json::Value::Null)),
    };
    let recorded = RunManifest::load(manifest).map_err(|e| fail(e.into()))?;
    let cfg: PipelineConfig = serde_json::from_value(recorded.config.clone())
        .map_err(|e| fail(ConfigError(format!("{}: {e}", manifest.display())).into()))?;
    let outcome = run_pipeline(&cfg, out)?;
    if outcome.manifest.inputs != recorded.inputs {
        return Err(PipelineError {
            stage: "verify-inputs".into(),
            source: ConfigError("input digests differ from the manifest".into()).into(),
            manifest: Box::new(outcome.manifest),
        });
    }
    Ok(outcome)
}

/// Loads a split's dataset info and images; used by the stage subcommands.
pub fn load_dataset(data: &Path, split: Split) -> Result<(DatasetInfo, LabeledImageSet), StageError> {
    Ok((load_info(data)?, load_split(data, split)?))
}
