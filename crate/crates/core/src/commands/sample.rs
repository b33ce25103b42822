use std::fs;
use std::path::{Path, PathBuf};

use super::data::LoadedData;
use super::train::{load_trained_denoisers, load_trained_evaluator, load_trained_vae};
use super::{write_with_config, Context};
use crate::dataset::{read_sequence_dir, write_sequence, MotionSequence};
use crate::pipeline::{
    evaluate as score, generate, generation_plan, noise_schedule, DenoiserSet, EvalProtocol,
    MetricReport, ModelSet, SampleMode, VaeRole,
};
use crate::{Error, Result};

/// The sampler block echoed into every generated file.
fn sampler_block(ctx: &Context) -> String {
    let c = &ctx.cfg;
    format!(
        "T = {}\nadvanced_rate = {:?}\nk = {}\nguidance_scale = {:?}\nbridge_sample = {}\nseed = {}\n",
        c.schedule.steps,
        c.sampler.advanced_rate,
        c.sampler.k,
        c.sampler.guidance_scale,
        c.sampler.bridge_sample,
        c.seeds.sample
    )
}

/// Loads what `mode` needs, reporting the first absent prerequisite.
pub(crate) fn load_models(ctx: &Context, mode: SampleMode, data: &LoadedData) -> Result<ModelSet> {
    let who = format!("{mode} sampling");
    let mut m = ModelSet::default();
    if matches!(mode, SampleMode::B2a | SampleMode::BasicOnly) {
        let (vae, digest) = load_trained_vae(ctx, VaeRole::Basic, data, &who)?;
        m.basic = Some(load_trained_denoisers(
            ctx,
            DenoiserSet::Basic,
            &digest,
            &who,
        )?);
        m.basic_vae = Some(vae);
    }
    if matches!(mode, SampleMode::B2a | SampleMode::AdvancedOnly) {
        let (vae, digest) = load_trained_vae(ctx, VaeRole::Advanced, data, &who)?;
        if mode == SampleMode::B2a {
            m.advanced = Some(load_trained_denoisers(
                ctx,
                DenoiserSet::Advanced,
                &digest,
                &who,
            )?);
        } else {
            m.advanced_only = Some(load_trained_denoisers(
                ctx,
                DenoiserSet::AdvancedOnly,
                &digest,
                &who,
            )?);
        }
        m.advanced_vae = Some(vae);
    }
    Ok(m)
}

/// Generates `count` sequences per condition (or for the one given) into
/// `samples/<mode>/NNNN.seq`, replacing earlier samples of that mode.
pub fn sample(
    ctx: &Context,
    mode: SampleMode,
    condition: Option<usize>,
    count: Option<usize>,
) -> Result<Vec<PathBuf>> {
    let cfg = &ctx.cfg;
    let count = count.unwrap_or(cfg.metrics.samples_per_condition);
    if let Some(c) = condition {
        if c >= cfg.num_labels() {
            return Err(Error::Config(format!(
                "condition {c} is outside the {} conditions of the dataset",
                cfg.num_labels()
            )));
        }
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let data = super::load_data(ctx)?;
    let models = load_models(ctx, mode, &data)?;
    let mut plan = generation_plan(
        &data.bundle.splits.test,
        cfg.num_labels(),
        count,
        cfg.data.max_len,
    );
    if let Some(c) = condition {
        plan.retain(|(pc, _)| pc.label() == Some(c));
    }
    let schedule = noise_schedule(cfg)?;
    let seqs = generate(
        cfg,
        mode,
        &models,
        &schedule,
        &data.bundle.stats,
        &plan,
        cfg.seeds.sample,
    )?;

    let dir = ctx.layout().samples(mode);
    clear_sequences(&dir)?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let block = sampler_block(ctx);
    let config = cfg.to_toml();
    seqs.iter()
        .enumerate()
        .map(|(i, s)| {
            let path = dir.join(format!("{i:04}.seq"));
            let provenance = format!(
                "[sampler]\n{block}mode = \"{mode}\"\ncondition = {}\nrequest = {i}\n\n[run]\n{config}",
                s.label.map_or(-1, |l| l as i64)
            );
            write_sequence(&path, s, &provenance)?;
            Ok(path)
        })
        .collect()
}

fn clear_sequences(dir: &Path) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "seq") {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceSplit {
    Train,
    Val,
    Test,
}

impl ReferenceSplit {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }

    fn pick(self, data: &LoadedData) -> &[MotionSequence] {
        let s = &data.bundle.splits;
        match self {
            Self::Train => &s.train,
            Self::Val => &s.val,
            Self::Test => &s.test,
        }
    }
}

/// Scores a directory of generated sequences (by default the samples of
/// `mode`) against a reference split and writes `reports/<name>.txt` and
/// `.csv`.
pub fn evaluate(
    ctx: &Context,
    mode: SampleMode,
    generated: Option<&Path>,
    reference: ReferenceSplit,
) -> Result<MetricReport> {
    let data = super::load_data(ctx)?;
    let evaluator = load_trained_evaluator(ctx, &data)?;
    let layout = ctx.layout();
    let default_dir = layout.samples(mode);
    let dir = generated.unwrap_or(&default_dir);
    let hint = || {
        Error::Missing(format!(
            "no generated sequences in {}; run `b2a sample --mode {mode}` first",
            dir.display()
        ))
    };
    if !dir.is_dir() {
        return Err(hint());
    }
    let seqs = read_sequence_dir(dir)?;
    if seqs.is_empty() {
        return Err(hint());
    }
    let report = score(
        &evaluator,
        reference.pick(&data),
        &seqs,
        EvalProtocol::from_config(&ctx.cfg),
        ctx.cfg.seeds.sample,
        ctx.cfg.seeds.metrics,
    )?;
    let name = match generated {
        None => mode.as_str().to_string(),
        Some(d) => d
            .file_name()
            .map_or_else(|| "generated".into(), |n| n.to_string_lossy().into_owned()),
    };
    let name = format!("{name}-vs-{}", reference.as_str());
    let path = layout.report(&name);
    write_with_config(&path, report.to_text(), &ctx.cfg)?;
    write_with_config(&path.with_extension("csv"), report.to_csv(), &ctx.cfg)?;
    Ok(report)
}
