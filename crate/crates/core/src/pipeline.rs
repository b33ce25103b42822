//! End-to-end building blocks shared by the command line, the examples and
//! the tests: data preparation, model construction and training, generation
//! and metric reports.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::autodiff::Tensor;
use crate::config::{RunConfig, VaeSection};
use crate::dataset::{generate_synthetic, split_dataset, DatasetStats, MotionSequence, Splits};
use crate::denoiser::{Condition, DenoiserModel, TimestepRange};
use crate::diffusion::NoiseSchedule;
use crate::metrics::{
    diversity, fid, mm_dist, mmodality, r_precision, train_evaluator, Evaluator, EvaluatorReport,
    GaussianStats, RPrecision,
};
use crate::rng::{derive_seed, streams};
use crate::sampler::{SamplerBundle, SingleSpace};
use crate::train::{self, DenoiserEpoch, DenoiserTraining, VaeEpoch};
use crate::vae::{LatentCode, LatentSpec, VaeModel};
use crate::{Error, Result};

/// Generated dataset split three ways, with statistics fitted on train.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBundle {
    pub splits: Splits,
    pub stats: DatasetStats,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<DataBundle> {
    let d = &cfg.data;
    let seqs = generate_synthetic(&d.synthetic_spec(), d.count, cfg.seeds.data)?;
    let splits = split_dataset(&seqs, d.val_fraction, d.test_fraction, cfg.seeds.split)?;
    let stats = DatasetStats::fit(&splits.train)?;
    Ok(DataBundle { splits, stats })
}

pub fn normalized_frames(stats: &DatasetStats, seqs: &[MotionSequence]) -> Result<Vec<Tensor>> {
    Ok(stats
        .normalize_all(seqs)?
        .into_iter()
        .map(|s| s.frames)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VaeRole {
    Basic,
    Advanced,
}

impl VaeRole {
    fn id(self) -> u64 {
        match self {
            Self::Basic => 1,
            Self::Advanced => 2,
        }
    }
}

fn vae_section(cfg: &RunConfig, role: VaeRole) -> VaeSection<()> {
    match role {
        VaeRole::Basic => cfg.vae_basic.erase(),
        VaeRole::Advanced => cfg.vae_advanced.erase(),
    }
}

pub fn init_vae(cfg: &RunConfig, role: VaeRole) -> Result<VaeModel> {
    let section = vae_section(cfg, role);
    Ok(VaeModel::new(
        cfg.vae_config(&section),
        derive_seed(cfg.seeds.train, &[streams::INIT, role.id()]),
    )?)
}

/// Runs `epochs` of VAE training on normalized training frames.
pub fn train_vae_epochs(
    cfg: &RunConfig,
    role: VaeRole,
    vae: &mut VaeModel,
    frames: &[Tensor],
    epochs: Range<usize>,
) -> Result<Vec<VaeEpoch>> {
    let section = vae_section(cfg, role);
    train::train_vae(
        vae,
        frames,
        &section.training(),
        epochs,
        derive_seed(cfg.seeds.train, &[streams::TRAIN, role.id()]),
    )
}

/// Fits and installs the latent standardization.
pub fn finish_vae(vae: &mut VaeModel, frames: &[Tensor]) -> Result<()> {
    let stats = train::fit_latent_stats(vae, frames)?;
    vae.set_latent_stats(Some(stats));
    Ok(())
}

/// Builds and fully trains a VAE, returning it with its curve.
pub fn fit_vae(
    cfg: &RunConfig,
    role: VaeRole,
    frames: &[Tensor],
) -> Result<(VaeModel, Vec<VaeEpoch>)> {
    let mut vae = init_vae(cfg, role)?;
    let epochs = vae_section(cfg, role).epochs;
    let curve = train_vae_epochs(cfg, role, &mut vae, frames, 0..epochs)?;
    finish_vae(&mut vae, frames)?;
    Ok((vae, curve))
}

/// The denoiser sets that can be trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiserSet {
    /// One full-range denoiser in the basic latent space.
    Basic,
    /// `k` denoisers partitioning the advanced timesteps.
    Advanced,
    /// One full-range denoiser in the advanced latent space.
    AdvancedOnly,
}

impl DenoiserSet {
    fn id(self) -> u64 {
        match self {
            Self::Basic => 3,
            Self::Advanced => 4,
            Self::AdvancedOnly => 5,
        }
    }

    pub fn latent(self, cfg: &RunConfig) -> LatentSpec {
        match self {
            Self::Basic => cfg.vae_basic.latent(),
            Self::Advanced | Self::AdvancedOnly => cfg.vae_advanced.latent(),
        }
    }

    pub fn ranges(self, cfg: &RunConfig) -> Result<Vec<TimestepRange>> {
        let steps = cfg.schedule.steps;
        match self {
            Self::Basic | Self::AdvancedOnly => Ok(vec![TimestepRange::full(steps)]),
            Self::Advanced => Ok(cfg
                .denoiser_schedule()?
                .segments()
                .iter()
                .map(|s| s.range)
                .collect()),
        }
    }

    pub fn weighted(self, cfg: &RunConfig) -> bool {
        match self {
            Self::Basic => cfg.denoiser.loss_weight_basic,
            Self::Advanced | Self::AdvancedOnly => cfg.denoiser.loss_weight_advanced,
        }
    }

    pub fn training(self, cfg: &RunConfig) -> DenoiserTraining {
        cfg.denoiser.training(self.weighted(cfg))
    }
}

pub fn noise_schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    Ok(NoiseSchedule::new(cfg.schedule.params())?)
}

pub fn init_denoisers(cfg: &RunConfig, set: DenoiserSet) -> Result<Vec<DenoiserModel>> {
    let config = cfg.denoiser_config(set.latent(cfg));
    set.ranges(cfg)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let seed = derive_seed(cfg.seeds.train, &[streams::INIT, set.id(), i as u64]);
            Ok(DenoiserModel::new(config, r, seed)?)
        })
        .collect()
}

pub fn train_denoiser_epochs(
    cfg: &RunConfig,
    set: DenoiserSet,
    models: &mut [DenoiserModel],
    latents: &[(LatentCode, Condition)],
    schedule: &NoiseSchedule,
    epochs: Range<usize>,
) -> Result<Vec<DenoiserEpoch>> {
    train::train_denoisers(
        models,
        latents,
        schedule,
        &set.training(cfg),
        epochs,
        derive_seed(cfg.seeds.train, &[streams::TRAIN, set.id()]),
    )
}

/// Builds and fully trains a denoiser set on latents of `vae`.
pub fn fit_denoisers(
    cfg: &RunConfig,
    set: DenoiserSet,
    vae: &VaeModel,
    normalized_train: &[MotionSequence],
    schedule: &NoiseSchedule,
) -> Result<(Vec<DenoiserModel>, Vec<DenoiserEpoch>)> {
    let latents = train::latent_dataset(vae, normalized_train)?;
    let mut models = init_denoisers(cfg, set)?;
    let curve = train_denoiser_epochs(
        cfg,
        set,
        &mut models,
        &latents,
        schedule,
        0..cfg.denoiser.epochs,
    )?;
    Ok((models, curve))
}

pub fn fit_evaluator(
    cfg: &RunConfig,
    train: &[MotionSequence],
    val: &[MotionSequence],
) -> Result<(Evaluator, EvaluatorReport)> {
    Ok(train_evaluator(
        train,
        val,
        cfg.evaluator_config(),
        cfg.evaluator_training(),
        derive_seed(cfg.seeds.train, &[streams::INIT, 7]),
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    B2a,
    BasicOnly,
    AdvancedOnly,
}

impl SampleMode {
    pub const ALL: [Self; 3] = [Self::B2a, Self::BasicOnly, Self::AdvancedOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::B2a => "b2a",
            Self::BasicOnly => "basic-only",
            Self::AdvancedOnly => "advanced-only",
        }
    }
}

impl fmt::Display for SampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown sampling mode `{s}`")))
    }
}

/// Trained models a sampling mode draws on. Absent members are only an
/// error for the modes that need them.
#[derive(Debug, Clone, Default)]
pub struct ModelSet {
    pub basic_vae: Option<VaeModel>,
    pub advanced_vae: Option<VaeModel>,
    pub basic: Option<Vec<DenoiserModel>>,
    pub advanced: Option<Vec<DenoiserModel>>,
    pub advanced_only: Option<Vec<DenoiserModel>>,
}

fn need<'a, T>(x: &'a Option<T>, what: &str, mode: SampleMode) -> Result<&'a T> {
    x.as_ref()
        .ok_or_else(|| Error::Missing(format!("{mode} sampling needs the {what}")))
}

/// One request per (condition, draw): condition-major, lengths cycling
/// through the reference sequences of that condition (or `max_len`).
pub fn generation_plan(
    reference: &[MotionSequence],
    num_labels: usize,
    per_condition: usize,
    max_len: usize,
) -> Vec<(Condition, usize)> {
    let mut lens: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for s in reference {
        if let Some(l) = s.label {
            lens.entry(l).or_default().push(s.len());
        }
    }
    let mut plan = Vec::with_capacity(num_labels * per_condition);
    for c in 0..num_labels {
        let ls = lens.get(&c);
        for j in 0..per_condition {
            let len = ls.map_or(max_len, |v| v[j % v.len()]).min(max_len);
            plan.push((Condition::Label(c), len));
        }
    }
    plan
}

/// Generates and denormalizes one sequence per plan entry.
pub fn generate(
    cfg: &RunConfig,
    mode: SampleMode,
    models: &ModelSet,
    schedule: &NoiseSchedule,
    stats: &DatasetStats,
    plan: &[(Condition, usize)],
    seed: u64,
) -> Result<Vec<MotionSequence>> {
    let guidance = cfg.guidance();
    let frames = match mode {
        SampleMode::B2a => {
            let bundle = SamplerBundle {
                basic_vae: need(&models.basic_vae, "basic VAE", mode)?.clone(),
                advanced_vae: need(&models.advanced_vae, "advanced VAE", mode)?.clone(),
                basic_denoiser: need(&models.basic, "basic denoiser", mode)?
                    .first()
                    .ok_or_else(|| Error::Missing("empty basic denoiser set".into()))?
                    .clone(),
                advanced_denoisers: need(&models.advanced, "advanced denoisers", mode)?.clone(),
                schedule: schedule.clone(),
                denoiser_schedule: cfg.denoiser_schedule()?,
                guidance,
                bridge_sample: cfg.sampler.bridge_sample,
            };
            bundle.sample_b2a_many(plan, seed)?
        }
        SampleMode::BasicOnly => SingleSpace {
            vae: need(&models.basic_vae, "basic VAE", mode)?,
            denoisers: need(&models.basic, "basic denoiser", mode)?,
            schedule,
            guidance,
        }
        .sample_many(plan, seed)?,
        SampleMode::AdvancedOnly => SingleSpace {
            vae: need(&models.advanced_vae, "advanced VAE", mode)?,
            denoisers: need(&models.advanced_only, "advanced-only denoisers", mode)?,
            schedule,
            guidance,
        }
        .sample_many(plan, seed)?,
    };
    frames
        .into_iter()
        .zip(plan)
        .map(|(f, &(c, _))| {
            let s = MotionSequence {
                frames: f,
                label: c.label(),
                fps: cfg.data.fps,
            };
            Ok(stats.denormalize(&s)?)
        })
        .collect()
}

/// Metric settings that shape a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalProtocol {
    pub pool: usize,
    pub diversity_pairs: usize,
    pub mmodality_m: usize,
}

impl EvalProtocol {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            pool: cfg.metrics.pool,
            diversity_pairs: cfg.metrics.diversity_pairs,
            mmodality_m: cfg.metrics.mmodality_m,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub fid: f64,
    pub r_precision: RPrecision,
    pub mm_dist: f64,
    pub diversity: f64,
    pub mmodality: f64,
    pub sample_seed: u64,
    pub metrics_seed: u64,
    pub real_count: usize,
    pub generated_count: usize,
    /// Conditions with at least `2 * mmodality_m` generations; multimodality
    /// is NaN when there are none.
    pub mmodality_conditions: usize,
    pub protocol: EvalProtocol,
}

const REPORT_KEYS: [&str; 15] = [
    "fid",
    "r_precision_top1",
    "r_precision_top2",
    "r_precision_top3",
    "mm_dist",
    "diversity",
    "mmodality",
    "sample_seed",
    "metrics_seed",
    "real_count",
    "generated_count",
    "mmodality_conditions",
    "rprecision_pool",
    "diversity_pairs",
    "mmodality_m",
];

impl MetricReport {
    fn values(&self) -> Vec<(&'static str, String)> {
        let p = &self.protocol;
        REPORT_KEYS
            .iter()
            .copied()
            .zip([
                format!("{:?}", self.fid),
                format!("{:?}", self.r_precision.top1),
                format!("{:?}", self.r_precision.top2),
                format!("{:?}", self.r_precision.top3),
                format!("{:?}", self.mm_dist),
                format!("{:?}", self.diversity),
                format!("{:?}", self.mmodality),
                self.sample_seed.to_string(),
                self.metrics_seed.to_string(),
                self.real_count.to_string(),
                self.generated_count.to_string(),
                self.mmodality_conditions.to_string(),
                p.pool.to_string(),
                p.diversity_pairs.to_string(),
                p.mmodality_m.to_string(),
            ])
            .collect()
    }

    /// `key = value` lines; floats round-trip exactly.
    pub fn to_text(&self) -> String {
        self.values()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn csv_header() -> String {
        REPORT_KEYS.join(",")
    }

    pub fn csv_row(&self) -> String {
        self.values()
            .into_iter()
            .map(|(_, v)| v)
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::csv_header(), self.csv_row())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once(" = ").ok_or_else(|| {
                Error::Invalid(format!("report line `{line}` is not key = value"))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        fn get<T: FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<T> {
            m.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Invalid(format!("report lacks a valid `{k}`")))
        }
        Ok(Self {
            fid: get(&map, "fid")?,
            r_precision: RPrecision {
                top1: get(&map, "r_precision_top1")?,
                top2: get(&map, "r_precision_top2")?,
                top3: get(&map, "r_precision_top3")?,
            },
            mm_dist: get(&map, "mm_dist")?,
            diversity: get(&map, "diversity")?,
            mmodality: get(&map, "mmodality")?,
            sample_seed: get(&map, "sample_seed")?,
            metrics_seed: get(&map, "metrics_seed")?,
            real_count: get(&map, "real_count")?,
            generated_count: get(&map, "generated_count")?,
            mmodality_conditions: get(&map, "mmodality_conditions")?,
            protocol: EvalProtocol {
                pool: get(&map, "rprecision_pool")?,
                diversity_pairs: get(&map, "diversity_pairs")?,
                mmodality_m: get(&map, "mmodality_m")?,
            },
        })
    }

    /// Largest absolute difference over the floating-point fields; two NaNs
    /// count as equal.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let a = [
            self.fid,
            self.r_precision.top1,
            self.r_precision.top2,
            self.r_precision.top3,
            self.mm_dist,
            self.diversity,
            self.mmodality,
        ];
        let b = [
            other.fid,
            other.r_precision.top1,
            other.r_precision.top2,
            other.r_precision.top3,
            other.mm_dist,
            other.diversity,
            other.mmodality,
        ];
        a.iter()
            .zip(&b)
            .map(|(x, y)| {
                if x.is_nan() && y.is_nan() {
                    0.0
                } else if x.is_nan() || y.is_nan() {
                    f64::INFINITY
                } else {
                    (x - y).abs()
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Scores labelled generations against real sequences with a trained
/// evaluator. Multimodality groups the generations by label and uses the
/// groups large enough for two disjoint subsets.
pub fn evaluate(
    evaluator: &Evaluator,
    real: &[MotionSequence],
    generated: &[MotionSequence],
    protocol: EvalProtocol,
    sample_seed: u64,
    metrics_seed: u64,
) -> Result<MetricReport> {
    let real_feats = evaluator.motion_features(real)?;
    let pairs = evaluator.feature_pairs(generated)?;
    let gen_feats: Vec<Vec<f64>> = pairs.iter().map(|p| p.motion.clone()).collect();
    let fid = fid(
        &GaussianStats::fit(&real_feats)?,
        &GaussianStats::fit(&gen_feats)?,
    )?;
    let labels: Vec<usize> = generated
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::Invalid("generated sequence without a label".into()))
        })
        .collect::<Result<_>>()?;
    let rp = r_precision(&pairs, &labels, protocol.pool, metrics_seed)?;
    let mut groups: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (f, &l) in gen_feats.iter().zip(&labels) {
        groups.entry(l).or_default().push(f.clone());
    }
    groups.retain(|_, g| g.len() >= 2 * protocol.mmodality_m);
    let mmodality_conditions = groups.len();
    let mmod = if groups.is_empty() {
        f64::NAN
    } else {
        mmodality(&groups, protocol.mmodality_m, metrics_seed)?
    };
    Ok(MetricReport {
        fid,
        r_precision: rp,
        mm_dist: mm_dist(&pairs)?,
        diversity: diversity(&gen_feats, protocol.diversity_pairs, metrics_seed)?,
        mmodality: mmod,
        sample_seed,
        metrics_seed,
        real_count: real.len(),
        generated_count: generated.len(),
        mmodality_conditions,
        protocol,
    })
}
