//! Prints the cumulative signal level and the timestep loss weight along a
//! noise schedule, and shows where the advanced stage of a hierarchical
//! run picks up.

use b2a_hdm::config::RunConfig;
use b2a_hdm::diffusion::{LossWeightConfig, NoiseSchedule};
use b2a_hdm::sampler::DenoiserSchedule;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = RunConfig::default();
    let schedule = NoiseSchedule::new(cfg.schedule.params())?;
    let weight = LossWeightConfig::default();
    println!(
        "{:>5} {:>10} {:>12} {:>8}",
        "t", "beta", "alpha_bar", "lambda"
    );
    for t in [1, 10, 25, 50, 100, 150, 190, 200] {
        println!(
            "{t:>5} {:>10.5} {:>12.6e} {:>8.4}",
            schedule.beta(t)?,
            schedule.alpha_bar(t)?,
            schedule.loss_weight(t, weight)?
        );
    }

    for rate in [0.25, 0.5, 0.75, 0.95] {
        let ds = DenoiserSchedule::build(schedule.steps(), rate, cfg.sampler.k)?;
        let t_h = ds.advanced_steps();
        let ranges: Vec<String> = ds
            .segments()
            .iter()
            .map(|s| format!("d{}:{}", s.denoiser, s.range))
            .collect();
        println!(
            "rate {rate:.2}: T_h = {t_h:>3}, basic signal kept sqrt(alpha_bar) = {:.4}, {}",
            schedule.alpha_bar(t_h)?.sqrt(),
            ranges.join(" ")
        );
    }
    Ok(())
}
