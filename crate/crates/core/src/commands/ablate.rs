use std::fmt;
use std::str::FromStr;

use super::sample::load_models;
use super::train::{load_trained_evaluator, load_trained_vae};
use super::{write_with_config, Context};
use crate::config::RunConfig;
use crate::pipeline::{
    evaluate, fit_denoisers, fit_vae, generate, generation_plan, noise_schedule, DenoiserSet,
    EvalProtocol, MetricReport, ModelSet, SampleMode, VaeRole,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    /// Advanced diffusion rate.
    Rate,
    /// Number of advanced denoisers.
    K,
    /// Basic and advanced latent token counts, written `basic:advanced`.
    Dims,
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rate => "rate",
            Self::K => "k",
            Self::Dims => "dims",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Self::Rate => &["0.25", "0.5", "0.75", "0.95"],
            Self::K => &["1", "2", "3", "4"],
            Self::Dims => &["2:8", "4:8", "4:12"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    fn overrides(self, value: &str) -> Result<Vec<String>> {
        Ok(match self {
            Self::Rate => vec![format!("sampler.advanced_rate={value}")],
            Self::K => vec![format!("sampler.k={value}")],
            Self::Dims => {
                let (b, a) = value.split_once(':').ok_or_else(|| {
                    Error::Config(format!("dims value `{value}` is not basic:advanced"))
                })?;
                vec![
                    format!("vae_basic.tokens={}", b.trim()),
                    format!("vae_advanced.tokens={}", a.trim()),
                ]
            }
        })
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Rate, Self::K, Self::Dims]
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}` (rate, k or dims)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub value: String,
    pub report: MetricReport,
}

fn csv(axis: AblationAxis, rows: &[AblationRow]) -> String {
    let mut out = format!("axis,value,{}\n", MetricReport::csv_header());
    for r in rows {
        out.push_str(&format!("{axis},{},{}\n", r.value, r.report.csv_row()));
    }
    out
}

/// Sweeps one axis. Rate and k points reuse the trained VAEs and basic
/// denoiser and retrain the advanced denoisers; dims points retrain every
/// model. Each point is sampled in b2a mode and scored on the test split;
/// the CSV is rewritten after every point.
pub fn ablate(
    ctx: &Context,
    axis: AblationAxis,
    values: Option<&[String]>,
) -> Result<Vec<AblationRow>> {
    let values = values.map_or_else(|| axis.default_values(), <[String]>::to_vec);
    if values.is_empty() {
        return Err(Error::Config("ablation needs at least one value".into()));
    }
    let points: Vec<RunConfig> = values
        .iter()
        .map(|v| ctx.cfg.with_overrides(&axis.overrides(v)?))
        .collect::<Result<_>>()?;
    let data = super::load_data(ctx)?;
    let evaluator = load_trained_evaluator(ctx, &data)?;
    let base = match axis {
        AblationAxis::Rate | AblationAxis::K => {
            let mut m = load_models(ctx, SampleMode::BasicOnly, &data)?;
            m.advanced_vae = Some(load_trained_vae(ctx, VaeRole::Advanced, &data, "ablation")?.0);
            Some(m)
        }
        AblationAxis::Dims => None,
    };
    let splits = &data.bundle.splits;
    let stats = &data.bundle.stats;
    let train_norm = stats.normalize_all(&splits.train)?;
    let frames: Vec<_> = train_norm.iter().map(|s| s.frames.clone()).collect();
    let path = ctx.layout().ablation(axis.as_str());
    let mut rows = Vec::with_capacity(points.len());
    for (value, cfg) in values.into_iter().zip(points) {
        let schedule = noise_schedule(&cfg)?;
        let mut models = match &base {
            Some(m) => m.clone(),
            None => {
                let basic_vae = fit_vae(&cfg, VaeRole::Basic, &frames)?.0;
                let advanced_vae = fit_vae(&cfg, VaeRole::Advanced, &frames)?.0;
                let basic =
                    fit_denoisers(&cfg, DenoiserSet::Basic, &basic_vae, &train_norm, &schedule)?.0;
                ModelSet {
                    basic_vae: Some(basic_vae),
                    advanced_vae: Some(advanced_vae),
                    basic: Some(basic),
                    ..ModelSet::default()
                }
            }
        };
        let advanced_vae = models.advanced_vae.as_ref().expect("advanced VAE present");
        models.advanced = Some(
            fit_denoisers(
                &cfg,
                DenoiserSet::Advanced,
                advanced_vae,
                &train_norm,
                &schedule,
            )?
            .0,
        );
        let plan = generation_plan(
            &splits.test,
            cfg.num_labels(),
            cfg.metrics.samples_per_condition,
            cfg.data.max_len,
        );
        let seqs = generate(
            &cfg,
            SampleMode::B2a,
            &models,
            &schedule,
            stats,
            &plan,
            cfg.seeds.sample,
        )?;
        let report = evaluate(
            &evaluator,
            &splits.test,
            &seqs,
            EvalProtocol::from_config(&cfg),
            cfg.seeds.sample,
            cfg.seeds.metrics,
        )?;
        rows.push(AblationRow { value, report });
        write_with_config(&path, csv(axis, &rows), &ctx.cfg)?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_values_become_overrides() {
        assert_eq!(
            AblationAxis::Dims.overrides("2 : 12").unwrap(),
            vec![
                "vae_basic.tokens=2".to_string(),
                "vae_advanced.tokens=12".to_string()
            ]
        );
        assert!(AblationAxis::Dims.overrides("4").is_err());
        assert_eq!(
            AblationAxis::Rate.overrides("0.5").unwrap(),
            vec!["sampler.advanced_rate=0.5"]
        );
        let base = RunConfig::default();
        for axis in [AblationAxis::Rate, AblationAxis::K, AblationAxis::Dims] {
            for v in axis.default_values() {
                base.with_overrides(&axis.overrides(&v).unwrap()).unwrap();
            }
        }
    }
}
