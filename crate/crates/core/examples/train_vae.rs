//! Trains VAEs with different latent token counts and compares their
//! validation reconstruction error.
//!
//! `cargo run --release --example train_vae -- [epochs]`

use b2a_hdm::config::RunConfig;
use b2a_hdm::pipeline::{fit_vae, normalized_frames, prepare_data, VaeRole};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs: usize = std::env::args().nth(1).map_or(Ok(15), |a| a.parse())?;
    let mut cfg = RunConfig::default();
    cfg.vae_advanced.epochs = epochs;
    let data = prepare_data(&cfg)?;
    let train = normalized_frames(&data.stats, &data.splits.train)?;
    let val = normalized_frames(&data.stats, &data.splits.val)?;
    let val: Vec<_> = val.iter().collect();
    for tokens in [1, 2, 4, 8] {
        cfg.vae_advanced.tokens = tokens;
        let (vae, curve) = fit_vae(&cfg, VaeRole::Advanced, &train)?;
        let last = curve.last().expect("at least one epoch");
        println!(
            "K={tokens}: train loss {:.5} (mse {:.5}, kl {:.4}), val mse {:.5}",
            last.loss,
            last.mse,
            last.kl,
            vae.reconstruction_mse(&val, 32)?
        );
    }
    Ok(())
}
