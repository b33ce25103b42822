//! Run configuration: a sectioned TOML document in which every key has a
//! default, unknown keys are rejected, and cross-field constraints are
//! checked before any work starts.

use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{SyntheticSpec, SYNTHETIC_FEATURES};
use crate::denoiser::{DenoiserConfig, GuidanceConfig};
use crate::diffusion::{LossWeightConfig, NoiseSchedule, ScheduleKind, ScheduleParams};
use crate::metrics::{EvaluatorConfig, EvaluatorTraining};
use crate::sampler::DenoiserSchedule;
use crate::train::{DenoiserTraining, VaeTraining};
use crate::vae::{LatentSpec, VaeConfig, VaeLossWeights};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub families: usize,
    pub variants: usize,
    /// Total sequences before splitting.
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
    pub fps: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            families: s.families,
            variants: s.variants,
            count: 800,
            min_len: s.min_len,
            max_len: s.max_len,
            noise: s.noise,
            fps: s.fps,
            val_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

impl DataSection {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            families: self.families,
            variants: self.variants,
            min_len: self.min_len,
            max_len: self.max_len,
            noise: self.noise,
            fps: self.fps,
        }
    }
}

/// Default latent token count of a VAE section.
pub trait LatentDefault {
    const TOKENS: usize;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Basic;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Advanced;

impl LatentDefault for Basic {
    const TOKENS: usize = 4;
}

impl LatentDefault for Advanced {
    const TOKENS: usize = 8;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, bound = "R: LatentDefault")]
pub struct VaeSection<R> {
    pub tokens: usize,
    pub channels: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub kl_weight: f64,
    pub mse_weight: f64,
    #[serde(skip)]
    role: PhantomData<R>,
}

impl<R: LatentDefault> Default for VaeSection<R> {
    fn default() -> Self {
        let tokens = R::TOKENS;
        let w = VaeLossWeights::default();
        Self {
            tokens,
            channels: 16,
            hidden: 32,
            blocks: 1,
            dropout: 0.0,
            epochs: 30,
            batch: 32,
            lr: 2e-3,
            kl_weight: w.kl,
            mse_weight: w.mse,
            role: PhantomData,
        }
    }
}

impl<R> VaeSection<R> {
    pub fn erase(&self) -> VaeSection<()> {
        VaeSection {
            tokens: self.tokens,
            channels: self.channels,
            hidden: self.hidden,
            blocks: self.blocks,
            dropout: self.dropout,
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            kl_weight: self.kl_weight,
            mse_weight: self.mse_weight,
            role: PhantomData,
        }
    }

    pub fn latent(&self) -> LatentSpec {
        LatentSpec::new(self.tokens, self.channels)
    }

    pub fn training(&self) -> VaeTraining {
        VaeTraining {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            weights: VaeLossWeights {
                kl: self.kl_weight,
                mse: self.mse_weight,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    /// `T = 200` with the `T = 1000` linear endpoints scaled by `1000 / T`.
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 200,
            beta_start: 5e-4,
            beta_end: 0.1,
        }
    }
}

impl ScheduleSection {
    pub fn params(&self) -> ScheduleParams {
        ScheduleParams {
            kind: self.kind,
            steps: self.steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub advanced_rate: f64,
    pub k: usize,
    pub guidance_scale: f64,
    pub bridge_sample: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            advanced_rate: 0.95,
            k: 2,
            guidance_scale: GuidanceConfig::default().scale,
            bridge_sample: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSection {
    pub hidden: usize,
    pub blocks: usize,
    pub time_features: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub drop_prob: f64,
    pub loss_weight_basic: bool,
    pub loss_weight_advanced: bool,
    pub w1: f64,
    pub w2: f64,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        let w = LossWeightConfig::default();
        Self {
            hidden: 64,
            blocks: 2,
            time_features: 32,
            dropout: 0.0,
            epochs: 150,
            batch: 32,
            lr: 1e-3,
            drop_prob: 0.1,
            loss_weight_basic: true,
            loss_weight_advanced: false,
            w1: w.w1,
            w2: w.w2,
        }
    }
}

impl DenoiserSection {
    pub fn training(&self, weighted: bool) -> DenoiserTraining {
        DenoiserTraining {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            drop_prob: self.drop_prob,
            loss_weight: weighted.then_some(LossWeightConfig {
                w1: self.w1,
                w2: self.w2,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluatorSection {
    pub hidden: usize,
    pub blocks: usize,
    pub pool_tokens: usize,
    pub feature_dim: usize,
    pub margin: f64,
    pub negatives: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for EvaluatorSection {
    fn default() -> Self {
        let c = EvaluatorConfig::new(1, 1, 1);
        let t = EvaluatorTraining::default();
        Self {
            hidden: c.hidden,
            blocks: c.blocks,
            pool_tokens: c.pool_tokens,
            feature_dim: c.feature_dim,
            margin: c.margin,
            negatives: c.negatives,
            epochs: t.epochs,
            batch: t.batch,
            lr: t.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub pool: usize,
    pub diversity_pairs: usize,
    pub mmodality_m: usize,
    /// Generated sequences per condition; also the multimodality groups.
    pub samples_per_condition: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            pool: crate::metrics::R_PRECISION_POOL,
            diversity_pairs: 30,
            mmodality_m: 3,
            samples_per_condition: 6,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSection {
    pub data: u64,
    pub split: u64,
    pub train: u64,
    pub sample: u64,
    pub metrics: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub vae_basic: VaeSection<Basic>,
    pub vae_advanced: VaeSection<Advanced>,
    pub schedule: ScheduleSection,
    pub sampler: SamplerSection,
    pub denoiser: DenoiserSection,
    pub evaluator: EvaluatorSection,
    pub metrics: MetricsSection,
    pub seeds: SeedSection,
    pub output: OutputSection,
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Applies `section.key=value` overrides, parsing each value as a TOML
    /// scalar (falling back to a bare string), then validates.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table =
            toml::from_str(&self.to_toml()).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let (section, field) = key
                .trim()
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override key `{key}` is not section.key")))?;
            let raw = raw.trim();
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let table = doc
                .get_mut(section)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| Error::Config(format!("unknown section `{section}`")))?;
            if !table.contains_key(field) {
                return Err(Error::Config(format!("unknown key `{section}.{field}`")));
            }
            table.insert(field.to_string(), value);
        }
        let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml(&text)
    }

    /// The fully resolved configuration, every key present.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn set_all_seeds(&mut self, seed: u64) {
        self.seeds = SeedSection {
            data: seed,
            split: seed,
            train: seed,
            sample: seed,
            metrics: seed,
        };
    }

    pub fn validate(&self) -> Result<()> {
        self.data
            .synthetic_spec()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let d = &self.data;
        check(
            d.val_fraction >= 0.0
                && d.test_fraction >= 0.0
                && d.val_fraction + d.test_fraction < 1.0,
            || {
                format!(
                    "data fractions val={} test={} must sum below 1",
                    d.val_fraction, d.test_fraction
                )
            },
        )?;
        for (name, v) in [
            ("vae_basic", self.vae_basic.erase()),
            ("vae_advanced", self.vae_advanced.erase()),
        ] {
            check(v.tokens >= 1 && v.channels >= 1 && v.hidden >= 1, || {
                format!("{name}: tokens, channels and hidden must be at least 1")
            })?;
            check(v.batch >= 1 && v.lr > 0.0, || {
                format!("{name}: batch and lr must be positive")
            })?;
            check((0.0..1.0).contains(&v.dropout), || {
                format!("{name}: dropout must be in [0, 1)")
            })?;
            check(v.kl_weight >= 0.0 && v.mse_weight > 0.0, || {
                format!("{name}: kl_weight must be >= 0 and mse_weight > 0")
            })?;
        }
        check(self.vae_basic.tokens < self.vae_advanced.tokens, || {
            format!(
                "basic latent tokens ({}) must be fewer than advanced ({})",
                self.vae_basic.tokens, self.vae_advanced.tokens
            )
        })?;
        NoiseSchedule::new(self.schedule.params()).map_err(|e| Error::Config(e.to_string()))?;
        let s = &self.sampler;
        check(s.guidance_scale >= 0.0, || {
            "guidance_scale must be >= 0".into()
        })?;
        DenoiserSchedule::build(self.schedule.steps, s.advanced_rate, s.k)
            .map_err(|e| Error::Config(e.to_string()))?;
        let n = &self.denoiser;
        check(n.hidden >= 1 && n.time_features >= 2, || {
            "denoiser hidden >= 1 and time_features >= 2 required".into()
        })?;
        check(n.batch >= 1 && n.lr > 0.0, || {
            "denoiser batch and lr must be positive".into()
        })?;
        check((0.0..1.0).contains(&n.drop_prob), || {
            "denoiser drop_prob must be in [0, 1)".into()
        })?;
        check((0.0..1.0).contains(&n.dropout), || {
            "denoiser dropout must be in [0, 1)".into()
        })?;
        let e = &self.evaluator;
        check(
            e.feature_dim >= 1 && e.pool_tokens >= 1 && e.hidden >= 1,
            || "evaluator dimensions must be at least 1".into(),
        )?;
        check(e.batch >= 1 && e.lr > 0.0 && e.margin > 0.0, || {
            "evaluator batch, lr and margin must be positive".into()
        })?;
        let m = &self.metrics;
        check(m.pool >= 1 && m.pool <= d.families * d.variants, || {
            format!(
                "retrieval pool {} needs as many conditions, data has {}",
                m.pool,
                d.families * d.variants
            )
        })?;
        check(
            m.mmodality_m >= 1 && m.samples_per_condition >= 2 * m.mmodality_m,
            || "samples_per_condition must be at least 2 * mmodality_m".into(),
        )?;
        check(
            m.diversity_pairs >= 1
                && 2 * m.diversity_pairs <= m.samples_per_condition * self.num_labels(),
            || "diversity_pairs must be at least 1 and at most half the generated set".into(),
        )?;
        Ok(())
    }

    pub fn num_labels(&self) -> usize {
        self.data.families * self.data.variants
    }

    pub fn vae_config<R>(&self, section: &VaeSection<R>) -> VaeConfig {
        VaeConfig {
            features: SYNTHETIC_FEATURES,
            max_len: self.data.max_len,
            latent: section.latent(),
            hidden: section.hidden,
            blocks: section.blocks,
            dropout: section.dropout,
        }
    }

    pub fn denoiser_config(&self, latent: LatentSpec) -> DenoiserConfig {
        DenoiserConfig {
            latent,
            num_labels: self.num_labels(),
            steps: self.schedule.steps,
            hidden: self.denoiser.hidden,
            blocks: self.denoiser.blocks,
            time_features: self.denoiser.time_features,
            dropout: self.denoiser.dropout,
        }
    }

    pub fn evaluator_config(&self) -> EvaluatorConfig {
        let e = &self.evaluator;
        EvaluatorConfig {
            features: SYNTHETIC_FEATURES,
            max_len: self.data.max_len,
            num_labels: self.num_labels(),
            hidden: e.hidden,
            blocks: e.blocks,
            pool_tokens: e.pool_tokens,
            feature_dim: e.feature_dim,
            margin: e.margin,
            negatives: e.negatives,
        }
    }

    pub fn evaluator_training(&self) -> EvaluatorTraining {
        EvaluatorTraining {
            epochs: self.evaluator.epochs,
            batch: self.evaluator.batch,
            lr: self.evaluator.lr,
        }
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            scale: self.sampler.guidance_scale,
        }
    }

    pub fn denoiser_schedule(&self) -> Result<DenoiserSchedule> {
        DenoiserSchedule::build(
            self.schedule.steps,
            self.sampler.advanced_rate,
            self.sampler.k,
        )
        .map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
        assert_eq!(c.vae_basic.latent(), LatentSpec::new(4, 16));
        assert_eq!(c.vae_advanced.latent(), LatentSpec::new(8, 16));
        assert_eq!(c.evaluator.feature_dim, 32);
    }

    #[test]
    fn unknown_keys_and_sections_are_errors() {
        assert!(matches!(
            RunConfig::from_toml("[data]\nbogus = 1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[nope]\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cross_field_checks() {
        let bad_k = "[sampler]\nadvanced_rate = 0.01\nk = 4\n[schedule]\nsteps = 100\n";
        assert!(matches!(RunConfig::from_toml(bad_k), Err(Error::Config(_))));
        let partial = RunConfig::from_toml("[vae_advanced]\nepochs = 3\n").unwrap();
        assert_eq!(partial.vae_advanced.tokens, 8);
        let bad_tokens = "[vae_basic]\ntokens = 8\n";
        assert!(matches!(
            RunConfig::from_toml(bad_tokens),
            Err(Error::Config(_))
        ));
        let bad_pool = "[data]\nfamilies = 2\nvariants = 2\n";
        assert!(matches!(
            RunConfig::from_toml(bad_pool),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn overrides_apply_and_validate() {
        let c = RunConfig::default()
            .with_overrides(&["sampler.k=3".into(), "schedule.kind=scaled-linear".into()])
            .unwrap();
        assert_eq!(c.sampler.k, 3);
        assert_eq!(c.schedule.kind, ScheduleKind::ScaledLinear);
        assert!(RunConfig::default()
            .with_overrides(&["sampler.kk=3".into()])
            .is_err());
        assert!(RunConfig::default()
            .with_overrides(&["vae_basic.tokens=9".into()])
            .is_err());
    }
}
