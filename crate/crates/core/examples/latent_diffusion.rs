//! Plain guided latent diffusion in one space: trains a VAE and a single
//! denoiser, then samples a few sequences per condition at several
//! guidance scales.
//!
//! `cargo run --release --example latent_diffusion`

use b2a_hdm::config::RunConfig;
use b2a_hdm::denoiser::{Condition, GuidanceConfig};
use b2a_hdm::pipeline::{
    fit_denoisers, fit_vae, noise_schedule, prepare_data, DenoiserSet, VaeRole,
};
use b2a_hdm::sampler::sample_single;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = RunConfig::default().with_overrides(&[
        "schedule.steps=50".into(),
        "vae_basic.epochs=10".into(),
        "denoiser.epochs=20".into(),
    ])?;
    let data = prepare_data(&cfg)?;
    let train = data.stats.normalize_all(&data.splits.train)?;
    let frames: Vec<_> = train.iter().map(|s| s.frames.clone()).collect();
    let (vae, _) = fit_vae(&cfg, VaeRole::Basic, &frames)?;
    let schedule = noise_schedule(&cfg)?;
    let (denoisers, curve) = fit_denoisers(&cfg, DenoiserSet::Basic, &vae, &train, &schedule)?;
    println!(
        "denoiser loss {:.4} -> {:.4}",
        curve.first().map_or(f64::NAN, |e| e.loss),
        curve.last().map_or(f64::NAN, |e| e.loss)
    );
    for scale in [0.0, 1.0, 4.0] {
        let mut spread = 0.0;
        for label in 0..3 {
            let s = sample_single(
                &vae,
                &denoisers[0],
                &schedule,
                GuidanceConfig { scale },
                Condition::Label(label),
                cfg.data.max_len,
                label as u64,
            )?;
            spread += s.data().iter().map(|v| v * v).sum::<f64>() / s.len() as f64;
        }
        println!(
            "guidance {scale}: mean square of normalized output {:.4}",
            spread / 3.0
        );
    }
    Ok(())
}
