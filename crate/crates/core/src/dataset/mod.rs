//! Conditional sequence data: the synthetic trajectory benchmark, the binary
//! sequence file format, redundant pose ingestion, normalization and splits.

mod redundant;
mod seqfile;
mod split;
mod stats;
mod synthetic;

use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;

pub use redundant::{load_redundant, PoseFrame, RedundantPoseLayout};
pub use seqfile::{
    decode_sequence, encode_sequence, read_sequence, read_sequence_dir, write_csv, write_sequence,
    write_sequence_dir, SequenceHeader, SEQ_MAGIC, SEQ_VERSION,
};
pub use split::{split_dataset, Splits};
pub use stats::DatasetStats;
pub use synthetic::{generate_synthetic, SyntheticSpec, SYNTHETIC_FEATURES};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("{path}: feature width {found} does not match layout width {expected}")]
    Width {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: non-finite value at frame {frame}, feature {feature}")]
    NonFinite {
        path: PathBuf,
        frame: usize,
        feature: usize,
    },
    #[error("{path}: foot-contact value {value} at frame {frame} is not 0 or 1")]
    Contact {
        path: PathBuf,
        frame: usize,
        value: f64,
    },
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("statistics cover {expected} features, sequence has {found}")]
    StatsWidth { expected: usize, found: usize },
}

impl DatasetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

/// An `N x J` sequence with its condition label and frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub frames: Tensor,
    pub label: Option<usize>,
    pub fps: f64,
}

impl MotionSequence {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> usize {
        self.frames.shape()[1]
    }
}

/// SHA-256 over the shapes, labels and frame bytes of a sequence list.
pub fn digest(seqs: &[MotionSequence]) -> String {
    let mut h = Sha256::new();
    for s in seqs {
        h.update((s.len() as u64).to_le_bytes());
        h.update((s.features() as u64).to_le_bytes());
        h.update(s.label.map_or(u64::MAX, |l| l as u64).to_le_bytes());
        h.update(s.fps.to_le_bytes());
        for v in s.frames.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
