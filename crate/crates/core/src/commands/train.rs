use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::data::LoadedData;
use super::{write_file, Context};
use crate::checkpoint::{
    denoiser_checkpoint, evaluator_checkpoint, load_denoisers, load_evaluator, load_vae,
    vae_checkpoint, Checkpoint, CheckpointError,
};
use crate::dataset::SYNTHETIC_FEATURES;
use crate::denoiser::DenoiserModel;
use crate::metrics::Evaluator;
use crate::pipeline::{
    finish_vae, fit_evaluator, init_denoisers, init_vae, noise_schedule, normalized_frames,
    train_denoiser_epochs, train_vae_epochs, DenoiserSet, VaeRole,
};
use crate::train::{
    denoiser_curve_csv, latent_dataset, vae_curve_csv, DenoiserTraining, VaeTraining,
};
use crate::vae::VaeModel;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTarget {
    VaeBasic,
    VaeAdvanced,
    DenoiserBasic,
    DenoiserAdvanced,
    DenoiserAdvancedOnly,
    Evaluator,
}

impl TrainTarget {
    /// Dependency order.
    pub const ALL: [Self; 6] = [
        Self::VaeBasic,
        Self::VaeAdvanced,
        Self::DenoiserBasic,
        Self::DenoiserAdvanced,
        Self::DenoiserAdvancedOnly,
        Self::Evaluator,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::VaeBasic => "vae-basic",
            Self::VaeAdvanced => "vae-advanced",
            Self::DenoiserBasic => "denoiser-basic",
            Self::DenoiserAdvanced => "denoiser-advanced",
            Self::DenoiserAdvancedOnly => "denoiser-advanced-only",
            Self::Evaluator => "evaluator",
        }
    }

    fn vae_role(self) -> Option<VaeRole> {
        match self {
            Self::VaeBasic | Self::DenoiserBasic => Some(VaeRole::Basic),
            Self::VaeAdvanced | Self::DenoiserAdvanced | Self::DenoiserAdvancedOnly => {
                Some(VaeRole::Advanced)
            }
            Self::Evaluator => None,
        }
    }

    fn denoiser_set(self) -> Option<DenoiserSet> {
        match self {
            Self::DenoiserBasic => Some(DenoiserSet::Basic),
            Self::DenoiserAdvanced => Some(DenoiserSet::Advanced),
            Self::DenoiserAdvancedOnly => Some(DenoiserSet::AdvancedOnly),
            _ => None,
        }
    }
}

impl fmt::Display for TrainTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for TrainTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown training target `{s}`")))
    }
}

fn vae_target(role: VaeRole) -> TrainTarget {
    match role {
        VaeRole::Basic => TrainTarget::VaeBasic,
        VaeRole::Advanced => TrainTarget::VaeAdvanced,
    }
}

fn set_target(set: DenoiserSet) -> TrainTarget {
    match set {
        DenoiserSet::Basic => TrainTarget::DenoiserBasic,
        DenoiserSet::Advanced => TrainTarget::DenoiserAdvanced,
        DenoiserSet::AdvancedOnly => TrainTarget::DenoiserAdvancedOnly,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub target: TrainTarget,
    /// Epochs already in the checkpoint when the command started.
    pub resumed_from: usize,
    pub epochs: usize,
    /// Mean loss of the last epoch run by this command.
    pub last_loss: Option<f64>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn toml_of<T: serde::Serialize>(v: &T) -> String {
    toml::to_string(v).expect("serializes")
}

fn vae_epochs(ctx: &Context, role: VaeRole) -> usize {
    match role {
        VaeRole::Basic => ctx.cfg.vae_basic.epochs,
        VaeRole::Advanced => ctx.cfg.vae_advanced.epochs,
    }
}

fn vae_signature(ctx: &Context, role: VaeRole, data: &LoadedData) -> String {
    let cfg = &ctx.cfg;
    let (config, training) = match role {
        VaeRole::Basic => (cfg.vae_config(&cfg.vae_basic), cfg.vae_basic.training()),
        VaeRole::Advanced => (
            cfg.vae_config(&cfg.vae_advanced),
            cfg.vae_advanced.training(),
        ),
    };
    let training = VaeTraining {
        epochs: 0,
        ..training
    };
    format!(
        "[model]\n{}\n[training]\n{}\ntrain_seed = {}\ndata = {}\n",
        toml_of(&config),
        toml_of(&training),
        cfg.seeds.train,
        data.digest
    )
}

fn denoiser_signature(ctx: &Context, set: DenoiserSet, vae_digest: &str) -> Result<String> {
    let cfg = &ctx.cfg;
    let training = DenoiserTraining {
        epochs: 0,
        ..set.training(cfg)
    };
    let ranges: Vec<String> = set.ranges(cfg)?.iter().map(|r| r.to_string()).collect();
    Ok(format!(
        "[model]\n{}\n[training]\n{}\n[schedule]\n{}\nranges = {:?}\ntrain_seed = {}\nvae = {}\n",
        toml_of(&cfg.denoiser_config(set.latent(cfg))),
        toml_of(&training),
        toml_of(&cfg.schedule.params()),
        ranges,
        cfg.seeds.train,
        vae_digest
    ))
}

fn evaluator_signature(ctx: &Context, data: &LoadedData) -> String {
    format!(
        "[model]\n{}\n[training]\n{}\ntrain_seed = {}\ndata = {}\n",
        toml_of(&ctx.cfg.evaluator_config()),
        toml_of(&ctx.cfg.evaluator_training()),
        ctx.cfg.seeds.train,
        data.digest
    )
}

fn missing(target: TrainTarget, path: &Path, why: &str) -> Error {
    Error::Missing(format!(
        "{why}: no complete `{target}` checkpoint at {}; run `b2a train {target}` first",
        path.display()
    ))
}

/// An existing checkpoint to resume from, or `None` to start fresh.
fn resumable(ctx: &Context, path: &Path, signature: &str) -> Result<Option<Checkpoint>> {
    if ctx.force || !path.exists() {
        return Ok(None);
    }
    let c = Checkpoint::load(path)?;
    if c.get("train.signature")? != signature {
        return Err(CheckpointError::Conflict(format!(
            "{} was trained with a different configuration or dataset; pass --force to retrain",
            path.display()
        ))
        .into());
    }
    Ok(Some(c))
}

/// Curve CSV rows below `done` epochs, or just the header.
fn existing_curve(path: &Path, header: &str, done: usize) -> String {
    let mut out = String::from(header);
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let epoch = line.split(',').next().and_then(|e| e.parse::<usize>().ok());
            if epoch.is_some_and(|e| e < done) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    out
}

fn stamp(c: &mut Checkpoint, ctx: &Context, signature: &str, done: usize) {
    c.set("train.signature", signature);
    c.set("train.epochs_done", done);
    c.set("run.config", ctx.cfg.to_toml());
}

/// Trains one target, resuming from its checkpoint when one exists for the
/// same configuration. Progress is checkpointed after every epoch.
pub fn train(ctx: &Context, target: TrainTarget) -> Result<TrainSummary> {
    let data = super::load_data(ctx)?;
    match (target.denoiser_set(), target.vae_role()) {
        (Some(set), Some(role)) => train_denoisers_target(ctx, set, role, &data),
        (None, Some(role)) => train_vae_target(ctx, role, &data),
        _ => train_evaluator_target(ctx, &data),
    }
}

fn train_vae_target(ctx: &Context, role: VaeRole, data: &LoadedData) -> Result<TrainSummary> {
    let target = vae_target(role);
    let layout = ctx.layout();
    let path = layout.checkpoint(target.as_str());
    let curve_path = layout.curve(target.as_str());
    let signature = vae_signature(ctx, role, data);
    let epochs = vae_epochs(ctx, role);
    let frames = normalized_frames(&data.bundle.stats, &data.bundle.splits.train)?;
    let (mut vae, done) = match resumable(ctx, &path, &signature)? {
        Some(c) => (load_vae(&c, None)?, c.parse::<usize>("train.epochs_done")?),
        None => (init_vae(&ctx.cfg, role)?, 0),
    };
    let mut csv = existing_curve(&curve_path, &vae_curve_csv(&[]), done);
    let mut last_loss = None;
    for e in done..epochs {
        let curve = train_vae_epochs(&ctx.cfg, role, &mut vae, &frames, e..e + 1)?;
        csv.push_str(vae_curve_csv(&curve).lines().nth(1).unwrap_or_default());
        csv.push('\n');
        last_loss = curve.last().map(|c| c.loss);
        if e + 1 == epochs {
            finish_vae(&mut vae, &frames)?;
        }
        let mut c = vae_checkpoint(&vae, ctx.cfg.seeds.train);
        stamp(&mut c, ctx, &signature, e + 1);
        c.save(&path)?;
        write_file(&curve_path, &csv)?;
    }
    if done == 0 && epochs == 0 {
        finish_vae(&mut vae, &frames)?;
        let mut c = vae_checkpoint(&vae, ctx.cfg.seeds.train);
        stamp(&mut c, ctx, &signature, 0);
        c.save(&path)?;
        write_file(&curve_path, &csv)?;
    }
    Ok(TrainSummary {
        target,
        resumed_from: done,
        epochs,
        last_loss,
    })
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// A fully trained VAE checkpoint for the current configuration, with its
/// file digest.
pub(crate) fn load_trained_vae(
    ctx: &Context,
    role: VaeRole,
    data: &LoadedData,
    needed_by: &str,
) -> Result<(VaeModel, String)> {
    let target = vae_target(role);
    let path = ctx.layout().checkpoint(target.as_str());
    if !path.exists() {
        return Err(missing(target, &path, needed_by));
    }
    let c = Checkpoint::load(&path)?;
    let cfg = &ctx.cfg;
    let latent = match role {
        VaeRole::Basic => cfg.vae_basic.latent(),
        VaeRole::Advanced => cfg.vae_advanced.latent(),
    };
    let vae = load_vae(&c, Some((SYNTHETIC_FEATURES, latent)))?;
    if c.get("train.signature")? != vae_signature(ctx, role, data) {
        return Err(CheckpointError::Conflict(format!(
            "{} was trained with a different configuration or dataset; rerun `b2a train {target} --force`",
            path.display()
        ))
        .into());
    }
    if c.parse::<usize>("train.epochs_done")? < vae_epochs(ctx, role)
        || vae.latent_stats().is_none()
    {
        return Err(missing(target, &path, needed_by));
    }
    Ok((vae, file_digest(&path)?))
}

fn train_denoisers_target(
    ctx: &Context,
    set: DenoiserSet,
    role: VaeRole,
    data: &LoadedData,
) -> Result<TrainSummary> {
    let target = set_target(set);
    let (vae, vae_digest) = load_trained_vae(ctx, role, data, target.as_str())?;
    let layout = ctx.layout();
    let path = layout.checkpoint(target.as_str());
    let curve_path = layout.curve(target.as_str());
    let signature = denoiser_signature(ctx, set, &vae_digest)?;
    let schedule = noise_schedule(&ctx.cfg)?;
    let epochs = ctx.cfg.denoiser.epochs;
    let (mut models, done) = match resumable(ctx, &path, &signature)? {
        Some(c) => (
            load_denoisers(&c, Some(set.latent(&ctx.cfg)))?.0,
            c.parse::<usize>("train.epochs_done")?,
        ),
        None => (init_denoisers(&ctx.cfg, set)?, 0),
    };
    let train_norm = data.bundle.stats.normalize_all(&data.bundle.splits.train)?;
    let latents = latent_dataset(&vae, &train_norm)?;
    let mut csv = existing_curve(&curve_path, &denoiser_curve_csv(&[]), done);
    let mut last_loss = None;
    let save = |models: &[DenoiserModel], done: usize, csv: &str| -> Result<()> {
        let mut c = denoiser_checkpoint(models, &schedule, ctx.cfg.seeds.train);
        stamp(&mut c, ctx, &signature, done);
        c.save(&path)?;
        write_file(&curve_path, csv)
    };
    for e in done..epochs {
        let curve =
            train_denoiser_epochs(&ctx.cfg, set, &mut models, &latents, &schedule, e..e + 1)?;
        for line in denoiser_curve_csv(&curve).lines().skip(1) {
            csv.push_str(line);
            csv.push('\n');
        }
        last_loss = Some(curve.iter().map(|c| c.loss).sum::<f64>() / curve.len() as f64);
        save(&models, e + 1, &csv)?;
    }
    if done == 0 && epochs == 0 {
        save(&models, 0, &csv)?;
    }
    Ok(TrainSummary {
        target,
        resumed_from: done,
        epochs,
        last_loss,
    })
}

/// Fully trained denoisers of `set` for the current configuration.
pub(crate) fn load_trained_denoisers(
    ctx: &Context,
    set: DenoiserSet,
    vae_digest: &str,
    needed_by: &str,
) -> Result<Vec<DenoiserModel>> {
    let target = set_target(set);
    let path = ctx.layout().checkpoint(target.as_str());
    if !path.exists() {
        return Err(missing(target, &path, needed_by));
    }
    let c = Checkpoint::load(&path)?;
    let (models, schedule) = load_denoisers(&c, Some(set.latent(&ctx.cfg)))?;
    let expected = noise_schedule(&ctx.cfg)?;
    if schedule.digest() != expected.digest()
        || c.get("train.signature")? != denoiser_signature(ctx, set, vae_digest)?
    {
        return Err(CheckpointError::Conflict(format!(
            "{} does not match the current configuration or its VAE; rerun `b2a train {target} --force`",
            path.display()
        ))
        .into());
    }
    if c.parse::<usize>("train.epochs_done")? < ctx.cfg.denoiser.epochs {
        return Err(missing(target, &path, needed_by));
    }
    Ok(models)
}

fn train_evaluator_target(ctx: &Context, data: &LoadedData) -> Result<TrainSummary> {
    let target = TrainTarget::Evaluator;
    let layout = ctx.layout();
    let path = layout.checkpoint(target.as_str());
    let signature = evaluator_signature(ctx, data);
    let epochs = ctx.cfg.evaluator.epochs;
    if let Some(c) = resumable(ctx, &path, &signature)? {
        return Ok(TrainSummary {
            target,
            resumed_from: c.parse("train.epochs_done")?,
            epochs,
            last_loss: None,
        });
    }
    let s = &data.bundle.splits;
    let (evaluator, report) = fit_evaluator(&ctx.cfg, &s.train, &s.val)?;
    let mut c = evaluator_checkpoint(&evaluator, ctx.cfg.seeds.train);
    stamp(&mut c, ctx, &signature, epochs);
    c.set("train.val_margin", format!("{:?}", report.val_margin));
    c.save(&path)?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in report.curve.iter().enumerate() {
        csv.push_str(&format!("{e},{l:?}\n"));
    }
    write_file(&layout.curve(target.as_str()), csv)?;
    Ok(TrainSummary {
        target,
        resumed_from: 0,
        epochs,
        last_loss: report.curve.last().copied(),
    })
}

pub(crate) fn load_trained_evaluator(ctx: &Context, data: &LoadedData) -> Result<Evaluator> {
    let target = TrainTarget::Evaluator;
    let path = ctx.layout().checkpoint(target.as_str());
    if !path.exists() {
        return Err(missing(target, &path, "evaluation"));
    }
    let c = Checkpoint::load(&path)?;
    if c.get("train.signature")? != evaluator_signature(ctx, data) {
        return Err(CheckpointError::Conflict(format!(
            "{} was trained with a different configuration or dataset; rerun `b2a train evaluator --force`",
            path.display()
        ))
        .into());
    }
    Ok(load_evaluator(&c)?)
}
