//! Capture parsing, flow assembly, anonymization and traffic-image datasets.

use std::io;
use std::path::{Path, PathBuf};

pub mod dataset;
pub mod flow;
pub mod idx;
pub mod image;
pub mod packet;
pub mod pcap;
pub mod sanitize;
pub mod synth;

pub use dataset::{build_dataset, DatasetBuild, LabeledImageSet, PrepConfig, Split};
pub use flow::{split_flows, FlowKey, PayloadMode, SplitStats, TrafficFlow};
pub use image::{to_image, uniform_length, TrafficImage};
pub use pcap::{parse_pcap, Capture, RawPacket};
pub use sanitize::{sanitize_corpus, SanitizationMap};
pub use synth::{synth_corpus, SynthSpec};

#[derive(Debug, thiserror::Error)]
pub enum TrafficError {
    #[error("unsupported capture format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed capture at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("malformed IDX data: {0}")]
    Format(String),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl TrafficError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        TrafficError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
