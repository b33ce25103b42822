//! Subcommand implementations. Every command reads and writes artifacts
//! under one output directory and is safe to rerun: identical configuration
//! and seeds reproduce identical files.

mod ablate;
mod data;
mod sample;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::pipeline::SampleMode;
use crate::{Error, Result};

pub use ablate::{ablate, AblationAxis, AblationRow};
pub use data::{gen_data, load_data, DataSummary, LoadedData};
pub use sample::{evaluate, sample, ReferenceSplit};
pub use train::{train, TrainSummary, TrainTarget};

/// Resolved configuration plus command-line switches.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: RunConfig,
    pub force: bool,
}

impl Context {
    pub fn new(cfg: RunConfig, force: bool) -> Self {
        Self { cfg, force }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.cfg.output.dir)
    }
}

/// Artifact paths below the output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn split_dir(&self, split: &str) -> PathBuf {
        self.data_dir().join(split)
    }

    pub fn stats(&self) -> PathBuf {
        self.data_dir().join("stats.txt")
    }

    pub fn manifest(&self) -> PathBuf {
        self.data_dir().join("manifest.toml")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn curve(&self, name: &str) -> PathBuf {
        self.root.join("curves").join(format!("{name}.csv"))
    }

    pub fn samples(&self, mode: SampleMode) -> PathBuf {
        self.root.join("samples").join(mode.as_str())
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.txt"))
    }

    pub fn ablation(&self, axis: &str) -> PathBuf {
        self.root.join("ablation").join(format!("{axis}.csv"))
    }
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `path` and a `.config.toml` sidecar echoing the configuration.
pub(crate) fn write_with_config(
    path: &Path,
    contents: impl AsRef<[u8]>,
    cfg: &RunConfig,
) -> Result<()> {
    write_file(path, contents)?;
    write_file(&path.with_extension("config.toml"), cfg.to_toml())
}
