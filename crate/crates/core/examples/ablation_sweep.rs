//! Drives the command layer the way the `b2a` binary does: generates data,
//! trains every model with a tiny budget in a temporary directory, then
//! sweeps the number of advanced denoisers and prints the CSV.
//!
//! `cargo run --release --example ablation_sweep`

use b2a_hdm::commands::{self, AblationAxis, Context, TrainTarget};
use b2a_hdm::config::RunConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut cfg = RunConfig::default().with_overrides(&[
        "schedule.steps=40".into(),
        "vae_basic.epochs=4".into(),
        "vae_advanced.epochs=4".into(),
        "denoiser.epochs=8".into(),
        "evaluator.epochs=4".into(),
    ])?;
    cfg.output.dir = dir.path().to_path_buf();
    let ctx = Context::new(cfg, false);
    commands::gen_data(&ctx)?;
    for t in TrainTarget::ALL {
        let s = commands::train(&ctx, t)?;
        println!("trained {t} for {} epochs", s.epochs);
    }
    let values: Vec<String> = ["1", "2", "4"].iter().map(|s| s.to_string()).collect();
    commands::ablate(&ctx, AblationAxis::K, Some(&values))?;
    print!("{}", std::fs::read_to_string(ctx.layout().ablation("k"))?);
    Ok(())
}
