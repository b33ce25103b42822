//! End-to-end hierarchical generation with small models: trains both VAEs,
//! the basic denoiser and the segmented advanced denoisers plus the
//! evaluator, traces one sampling run and scores all three sampling modes.
//!
//! `cargo run --release --example b2a_pipeline`

use b2a_hdm::config::RunConfig;
use b2a_hdm::denoiser::Condition;
use b2a_hdm::pipeline::{
    evaluate, fit_denoisers, fit_evaluator, fit_vae, generate, generation_plan, noise_schedule,
    prepare_data, DenoiserSet, EvalProtocol, ModelSet, SampleMode, VaeRole,
};
use b2a_hdm::sampler::{SamplerBundle, StageEvent};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = RunConfig::default().with_overrides(&[
        "schedule.steps=50".into(),
        "vae_basic.epochs=10".into(),
        "vae_advanced.epochs=10".into(),
        "denoiser.epochs=30".into(),
        "evaluator.epochs=10".into(),
    ])?;
    let data = prepare_data(&cfg)?;
    let train = data.stats.normalize_all(&data.splits.train)?;
    let frames: Vec<_> = train.iter().map(|s| s.frames.clone()).collect();
    let schedule = noise_schedule(&cfg)?;

    let (evaluator, ev) = fit_evaluator(&cfg, &data.splits.train, &data.splits.val)?;
    println!("evaluator validation margin {:.3}", ev.val_margin);
    let (basic_vae, _) = fit_vae(&cfg, VaeRole::Basic, &frames)?;
    let (advanced_vae, _) = fit_vae(&cfg, VaeRole::Advanced, &frames)?;
    let basic = fit_denoisers(&cfg, DenoiserSet::Basic, &basic_vae, &train, &schedule)?.0;
    let advanced = fit_denoisers(
        &cfg,
        DenoiserSet::Advanced,
        &advanced_vae,
        &train,
        &schedule,
    )?
    .0;
    let advanced_only = fit_denoisers(
        &cfg,
        DenoiserSet::AdvancedOnly,
        &advanced_vae,
        &train,
        &schedule,
    )?
    .0;

    let bundle = SamplerBundle {
        basic_vae: basic_vae.clone(),
        advanced_vae: advanced_vae.clone(),
        basic_denoiser: basic[0].clone(),
        advanced_denoisers: advanced.clone(),
        schedule: schedule.clone(),
        denoiser_schedule: cfg.denoiser_schedule()?,
        guidance: cfg.guidance(),
        bridge_sample: false,
    };
    let mut trace = Vec::new();
    bundle.sample_b2a_traced(Condition::Label(0), cfg.data.max_len, 0, Some(&mut trace))?;
    let mut last = String::new();
    for e in &trace {
        let name = match e {
            StageEvent::BasicDenoise { .. } => "basic denoise",
            StageEvent::BasicDecode { .. } => "basic decode",
            StageEvent::AdvancedEncode { .. } => "advanced encode",
            StageEvent::QSample { .. } => "q_sample",
            StageEvent::AdvancedDenoise { .. } => "advanced denoise",
            StageEvent::AdvancedDecode { .. } => "advanced decode",
        };
        if name != last {
            println!("stage: {name} {e:?}");
            last = name.into();
        }
    }

    let models = ModelSet {
        basic_vae: Some(basic_vae),
        advanced_vae: Some(advanced_vae),
        basic: Some(basic),
        advanced: Some(advanced),
        advanced_only: Some(advanced_only),
    };
    let plan = generation_plan(
        &data.splits.test,
        cfg.num_labels(),
        cfg.metrics.samples_per_condition,
        cfg.data.max_len,
    );
    for mode in SampleMode::ALL {
        let seqs = generate(&cfg, mode, &models, &schedule, &data.stats, &plan, 1)?;
        let r = evaluate(
            &evaluator,
            &data.splits.test,
            &seqs,
            EvalProtocol::from_config(&cfg),
            1,
            0,
        )?;
        println!(
            "{mode:<14} FID {:.4} top1 {:.3} MM-Dist {:.3} diversity {:.3}",
            r.fid, r.r_precision.top1, r.mm_dist, r.diversity
        );
    }
    Ok(())
}
