//! Run configuration: one JSON document, every key optional.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eval::ClassifierSpec;
use crate::traffic::{PrepConfig, SynthSpec};

#[derive(Debug, thiserror::Error)]
#[error("configuration error: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSettings {
    pub ratio: f64,
    pub epochs: usize,
    pub lr: f64,
    pub wd: f64,
    pub temperature: f64,
    pub batch_size: usize,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        Self {
            ratio: 0.05,
            epochs: 10,
            lr: 1e-6,
            wd: 1e-2,
            temperature: 0.07,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsoSettings {
    pub particles: usize,
    pub iters: usize,
    pub subsets: usize,
    /// Size of each evaluation subset as a fraction of the training rows.
    pub subset_ratio: f64,
    /// Surrogate classifier split as a fraction of each class.
    pub train_ratio: f64,
    pub lambda: f64,
    pub mu: f64,
    pub v_max: f64,
    pub w: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for PsoSettings {
    fn default() -> Self {
        Self {
            particles: 10,
            iters: 50,
            subsets: 4,
            subset_ratio: 0.05,
            train_ratio: 0.1,
            lambda: 0.5,
            mu: 0.0,
            v_max: 0.5,
            w: 0.5,
            c1: 2.0,
            c2: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TunerMode {
    #[default]
    Off,
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TunerSettings {
    pub mode: TunerMode,
    pub url: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    /// Mock replies, one per call; inline so a manifest carries them.
    pub responses: Vec<String>,
    /// Mock replies read from a file, one per line; used when `responses`
    /// is empty.
    pub script: Option<PathBuf>,
}

impl Default for TunerSettings {
    fn default() -> Self {
        Self {
            mode: TunerMode::Off,
            url: None,
            model: "deepseek-chat".into(),
            temperature: 0.0,
            timeout_secs: 30,
            responses: Vec::new(),
            script: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    /// Corpus root (`<root>/<class>/*.pcap`). Without one a synthetic
    /// corpus is generated from `synth`.
    pub corpus: Option<PathBuf>,
    pub synth: SynthSpec,
    pub prep: PrepConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub timesteps: usize,
    pub embed_dim: usize,
    pub lr: f64,
    pub wd: f64,
    pub t_ex: usize,
    pub probe_k: usize,
    pub probe_folds: usize,
    pub finetune: FinetuneSettings,
    pub pso: PsoSettings,
    pub tuner: TunerSettings,
    pub classifier: ClassifierSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: None,
            synth: SynthSpec::default(),
            prep: PrepConfig::default(),
            epochs: 100,
            batch_size: 64,
            timesteps: 500,
            embed_dim: 64,
            lr: 1e-3,
            wd: 0.05,
            t_ex: 50,
            probe_k: 5,
            probe_folds: 5,
            finetune: FinetuneSettings::default(),
            pso: PsoSettings::default(),
            tuner: TunerSettings::default(),
            classifier: ClassifierSpec::default(),
        }
    }
}

/// Per-stage seeds derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSeeds {
    pub split: u64,
    pub ddpm: u64,
    pub noise: u64,
    pub probe: u64,
    pub finetune: u64,
    pub subsets: u64,
    pub pso: u64,
}

fn derive(master: u64, stage: u64) -> u64 {
    master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stage.wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seeds(&self) -> StageSeeds {
        StageSeeds {
            split: self.prep.seed,
            ddpm: derive(self.seed, 1),
            noise: derive(self.seed, 2),
            probe: derive(self.seed, 3),
            finetune: derive(self.seed, 4),
            subsets: derive(self.seed, 5),
            pso: derive(self.seed, 6),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError(m));
        self.prep.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.classifier.validate().map_err(|e| ConfigError(e.to_string()))?;
        if self.corpus.is_none() && self.synth.classes < 2 {
            return fail(format!("synthetic corpus needs at least 2 classes, got {}", self.synth.classes));
        }
        if self.batch_size == 0 || self.timesteps == 0 {
            return fail("batch_size and timesteps must be positive".into());
        }
        if self.t_ex == 0 || self.t_ex > self.timesteps {
            return fail(format!("t_ex {} outside 1..={}", self.t_ex, self.timesteps));
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return fail(format!("embed_dim {} must be even and >= 2", self.embed_dim));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.wd >= 0.0 && self.wd.is_finite()) {
            return fail("lr and wd must be finite and non-negative".into());
        }
        if self.probe_k == 0 || self.probe_folds < 2 {
            return fail("probe_k must be positive and probe_folds at least 2".into());
        }
        let ft = &self.finetune;
        if !(ft.ratio > 0.0 && ft.ratio <= 1.0) {
            return fail(format!("finetune.ratio {} outside (0, 1]", ft.ratio));
        }
        if ft.batch_size == 0 || !(ft.temperature > 0.0) || !(ft.lr >= 0.0) || !(ft.wd >= 0.0) {
            return fail("finetune batch_size and temperature must be positive, lr and wd non-negative".into());
        }
        let p = &self.pso;
        if p.particles == 0 || p.subsets == 0 {
            return fail("pso.particles and pso.subsets must be positive".into());
        }
        for (name, v) in [("subset_ratio", p.subset_ratio), ("train_ratio", p.train_ratio)] {
            if !(v > 0.0 && v < 1.0) {
                return fail(format!("pso.{name} {v} outside (0, 1)"));
            }
        }
        if !(p.lambda >= 0.0) || !(p.mu >= 0.0) || !(p.v_max > 0.0) {
            return fail("pso.lambda and pso.mu must be non-negative, pso.v_max positive".into());
        }
        let start = crate::swarm::PsoParams { w: p.w, c1: p.c1, c2: p.c2 };
        if !crate::swarm::ParamBounds::default().contains(&start) {
            return fail(format!("initial coefficients {start:?} outside their bounds"));
        }
        if self.tuner.mode == TunerMode::Http && self.tuner.url.is_none() {
            return fail("tuner.mode http needs tuner.url".into());
        }
        Ok(())
    }
}
