//! Basic-to-advanced hierarchical latent diffusion for conditional sequence
//! generation, with the autodiff engine, models, sampler, data tooling and
//! evaluation suite it needs.

pub mod autodiff;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod train;
pub mod vae;

use std::path::PathBuf;

use autodiff::AutodiffError;
use checkpoint::CheckpointError;
use dataset::DatasetError;
use denoiser::DenoiserError;
use diffusion::DiffusionError;
use metrics::MetricsError;
use sampler::SamplerError;
use vae::VaeError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

fn autodiff_numerical(e: &AutodiffError) -> bool {
    matches!(
        e,
        AutodiffError::NonFinite { .. }
            | AutodiffError::NonFiniteGradient
            | AutodiffError::Domain { .. }
    )
}

fn vae_numerical(e: &VaeError) -> bool {
    matches!(e, VaeError::Autodiff(a) if autodiff_numerical(a))
}

fn denoiser_numerical(e: &DenoiserError) -> bool {
    match e {
        DenoiserError::Autodiff(a) => autodiff_numerical(a),
        DenoiserError::Vae(v) => vae_numerical(v),
        _ => false,
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by non-finite values or a non-converging
    /// numerical routine.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Autodiff(a) => autodiff_numerical(a),
            Error::Vae(v) => vae_numerical(v),
            Error::Denoiser(d) => denoiser_numerical(d),
            Error::Sampler(SamplerError::Denoiser(d)) => denoiser_numerical(d),
            Error::Sampler(SamplerError::Vae(v)) => vae_numerical(v),
            Error::Metrics(MetricsError::Sqrtm { .. } | MetricsError::NonFinite) => true,
            Error::Metrics(MetricsError::Autodiff(a)) => autodiff_numerical(a),
            Error::Dataset(DatasetError::NonFinite { .. }) => true,
            _ => false,
        }
    }

    /// Process exit code: 2 configuration, 3 missing prerequisite,
    /// 4 numerical failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Missing(_) => 3,
            Error::Checkpoint(CheckpointError::Conflict(_)) => 2,
            e if e.is_numerical() => 4,
            _ => 1,
        }
    }
}
