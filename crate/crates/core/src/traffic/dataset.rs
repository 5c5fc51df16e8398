//! Corpus directory → anonymized flows → stratified train/test image sets.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::flow::{split_flows, PayloadMode, SplitStats, TrafficFlow};
use super::idx::{self, ImageBlock};
use super::image::{to_image, uniform_length, TrafficImage};
use super::pcap::parse_pcap;
use super::sanitize::{sanitize_corpus, SanitizeStats};
use super::TrafficError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImageSet {
    pub images: Vec<TrafficImage>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl LabeledImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|im| im.label).collect()
    }

    pub fn pixels(&self) -> Vec<Vec<u8>> {
        self.images.iter().map(|im| im.pixels.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepConfig {
    /// Bytes kept per flow; must equal `width * height`.
    pub bytes: usize,
    pub width: usize,
    pub height: usize,
    /// Fraction of each class assigned to the training split.
    pub split: f64,
    pub seed: u64,
    /// Merge both directions of a conversation into one flow.
    pub session: bool,
    /// Keep IP and transport headers in the flow bytes.
    pub headers: bool,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            bytes: 784,
            width: 28,
            height: 28,
            split: 0.8,
            seed: 0,
            session: false,
            headers: true,
        }
    }
}

impl PrepConfig {
    pub fn validate(&self) -> Result<(), TrafficError> {
        if self.bytes == 0 || self.bytes != self.width * self.height {
            return Err(TrafficError::Config(format!(
                "bytes ({}) must equal width x height ({}x{})",
                self.bytes, self.width, self.height
            )));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(TrafficError::Config(format!(
                "split ratio {} is outside (0, 1)",
                self.split
            )));
        }
        Ok(())
    }

    pub fn payload_mode(&self) -> PayloadMode {
        if self.headers {
            PayloadMode::IpPackets
        } else {
            PayloadMode::TransportPayload
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBuild {
    pub train: LabeledImageSet,
    pub test: LabeledImageSet,
    /// Class directories that produced no usable flow.
    pub dropped_classes: Vec<String>,
    /// Usable flows per kept class, after sanitization.
    pub flows_per_class: Vec<usize>,
    pub split_stats: SplitStats,
    pub sanitize_stats: SanitizeStats,
    pub distinct_ips: usize,
    pub distinct_macs: usize,
}

/// Capture files of one class directory, sorted by name; hidden files skipped.
fn class_files(dir: &Path) -> Result<Vec<PathBuf>, TrafficError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| TrafficError::io(dir, e))? {
        let entry = entry.map_err(|e| TrafficError::io(dir, e))?;
        let path = entry.path();
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if path.is_file() && !hidden {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn class_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>, TrafficError> {
    if !root.is_dir() {
        return Err(TrafficError::Config(format!(
            "corpus directory {} does not exist",
            root.display()
        )));
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| TrafficError::io(root, e))? {
        let entry = entry.map_err(|e| TrafficError::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_dir() && !name.starts_with('.') {
            dirs.push((name, entry.path()));
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Per-class shuffle, first `round(ratio * n)` to train (at least one sample
/// on each side whenever a class has two or more).
fn stratified_split(counts: &[usize], ratio: f64, seed: u64) -> Vec<(Vec<usize>, Vec<usize>)> {
    counts
        .iter()
        .enumerate()
        .map(|(class, &n)| {
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class as u64).wrapping_mul(0x9e37_79b9));
            order.shuffle(&mut rng);
            let mut n_train = (ratio * n as f64).round() as usize;
            if n >= 2 {
                n_train = n_train.clamp(1, n - 1);
            } else {
                n_train = n;
            }
            let mut train = order[..n_train].to_vec();
            let mut test = order[n_train..].to_vec();
            train.sort_unstable();
            test.sort_unstable();
            (train, test)
        })
        .collect()
}

pub fn build_dataset(root: &Path, config: &PrepConfig) -> Result<DatasetBuild, TrafficError> {
    config.validate()?;
    let dirs = class_dirs(root)?;
    if dirs.is_empty() {
        return Err(TrafficError::Config(format!(
            "corpus directory {} has no class subdirectories",
            root.display()
        )));
    }
    let mut jobs = Vec::new();
    for (class, (_, dir)) in dirs.iter().enumerate() {
        for file in class_files(dir)? {
            jobs.push((class, file));
        }
    }
    let parsed: Vec<(usize, Vec<TrafficFlow>, SplitStats)> = jobs
        .par_iter()
        .map(|(class, file)| {
            let cap = parse_pcap(file)?;
            let (mut flows, stats) = split_flows(&cap, config.session);
            for f in &mut flows {
                f.label = *class;
            }
            Ok((*class, flows, stats))
        })
        .collect::<Result<_, TrafficError>>()?;

    let mut split_stats = SplitStats::default();
    let mut all_flows = Vec::new();
    for (_, flows, stats) in parsed {
        split_stats.merge(&stats);
        all_flows.extend(flows);
    }
    let mode = config.payload_mode();
    let (flows, map, sanitize_stats) = sanitize_corpus(all_flows, config.seed, mode);

    let mut per_dir: Vec<Vec<Vec<u8>>> = vec![Vec::new(); dirs.len()];
    for f in &flows {
        per_dir[f.label].push(uniform_length(&f.payload(mode), config.bytes));
    }
    let mut class_names = Vec::new();
    let mut dropped_classes = Vec::new();
    let mut kept: Vec<Vec<Vec<u8>>> = Vec::new();
    for ((name, _), samples) in dirs.into_iter().zip(per_dir) {
        if samples.is_empty() {
            log::warn!("class {name} has no usable flows and is dropped");
            dropped_classes.push(name);
        } else {
            class_names.push(name);
            kept.push(samples);
        }
    }
    if kept.is_empty() {
        return Err(TrafficError::Config(format!(
            "no usable flows under {}",
            root.display()
        )));
    }
    let flows_per_class: Vec<usize> = kept.iter().map(Vec::len).collect();
    let splits = stratified_split(&flows_per_class, config.split, config.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, (samples, (tr, te))) in kept.iter().zip(&splits).enumerate() {
        for &i in tr {
            train.push(to_image(&samples[i], config.width, config.height, label)?);
        }
        for &i in te {
            test.push(to_image(&samples[i], config.width, config.height, label)?);
        }
    }
    Ok(DatasetBuild {
        train: LabeledImageSet {
            images: train,
            class_names: class_names.clone(),
            split: Split::Train,
        },
        test: LabeledImageSet {
            images: test,
            class_names,
            split: Split::Test,
        },
        dropped_classes,
        flows_per_class,
        split_stats,
        sanitize_stats,
        distinct_ips: map.ip_map.len(),
        distinct_macs: map.mac_map.len(),
    })
}

pub fn write_idx(
    set: &LabeledImageSet,
    images_path: &Path,
    labels_path: &Path,
) -> Result<(), TrafficError> {
    let (height, width) = set
        .images
        .first()
        .map(|im| (im.height, im.width))
        .unwrap_or((28, 28));
    let mut pixels = Vec::with_capacity(set.len() * height * width);
    for im in &set.images {
        if (im.height, im.width) != (height, width) {
            return Err(TrafficError::Dimension(format!(
                "mixed image sizes {}x{} and {}x{}",
                height, width, im.height, im.width
            )));
        }
        pixels.extend_from_slice(&im.pixels);
    }
    let block = ImageBlock {
        height,
        width,
        pixels,
    };
    idx::write_file(images_path, &idx::encode_images(&block)?)?;
    idx::write_file(labels_path, &idx::encode_labels(&set.labels())?)
}

pub fn read_idx(
    images_path: &Path,
    labels_path: &Path,
    class_names: Vec<String>,
    split: Split,
) -> Result<LabeledImageSet, TrafficError> {
    let block = idx::decode_images(&idx::read_file(images_path)?)?;
    let labels = idx::decode_labels(&idx::read_file(labels_path)?)?;
    if labels.len() != block.len() {
        return Err(TrafficError::Format(format!(
            "{} labels for {} images",
            labels.len(),
            block.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
        return Err(TrafficError::Format(format!(
            "label {bad} but only {} classes",
            class_names.len()
        )));
    }
    let images = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| TrafficImage {
            width: block.width,
            height: block.height,
            pixels: block.image(i).to_vec(),
            label,
        })
        .collect();
    Ok(LabeledImageSet {
        images,
        class_names,
        split,
    })
}

/// Sidecar describing a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub class_names: Vec<String>,
    pub dropped_classes: Vec<String>,
    pub flows_per_class: Vec<usize>,
    pub train: usize,
    pub test: usize,
    pub config: PrepConfig,
}

pub const INFO_FILE: &str = "dataset.json";

pub fn split_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{}-images.idx", split.as_str())),
        dir.join(format!("{}-labels.idx", split.as_str())),
    )
}

pub fn write_dataset(dir: &Path, build: &DatasetBuild, config: &PrepConfig) -> Result<DatasetInfo, TrafficError> {
    for set in [&build.train, &build.test] {
        let (img, lab) = split_paths(dir, set.split);
        write_idx(set, &img, &lab)?;
    }
    let info = DatasetInfo {
        class_names: build.train.class_names.clone(),
        dropped_classes: build.dropped_classes.clone(),
        flows_per_class: build.flows_per_class.clone(),
        train: build.train.len(),
        test: build.test.len(),
        config: *config,
    };
    let json = serde_json::to_vec_pretty(&info).expect("dataset info serializes");
    idx::write_file(&dir.join(INFO_FILE), &json)?;
    Ok(info)
}

pub fn load_info(dir: &Path) -> Result<DatasetInfo, TrafficError> {
    let path = dir.join(INFO_FILE);
    let bytes = idx::read_file(&path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| TrafficError::Format(format!("{}: {e}", path.display())))
}

pub fn load_split(dir: &Path, split: Split) -> Result<LabeledImageSet, TrafficError> {
    let info = load_info(dir)?;
    let (img, lab) = split_paths(dir, split);
    read_idx(&img, &lab, info.class_names, split)
}
