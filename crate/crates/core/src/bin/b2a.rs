use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use b2a_hdm::commands::{self, AblationAxis, Context, ReferenceSplit, TrainTarget};
use b2a_hdm::config::RunConfig;
use b2a_hdm::pipeline::SampleMode;
use b2a_hdm::{Error, Result};

/// Basic-to-advanced hierarchical latent diffusion on synthetic sequences.
#[derive(Parser, Debug)]
#[command(name = "b2a", version)]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Sets every seed (data, split, train, sample, metrics).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace conflicting artifacts and retrain from scratch.
    #[arg(long, global = true)]
    force: bool,
    /// Override any configuration key, e.g. `--set denoiser.epochs=10`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Diffusion steps T.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Share of the steps run in the advanced space.
    #[arg(long, global = true)]
    advanced_rate: Option<f64>,
    /// Number of advanced denoisers.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Classifier-free guidance scale.
    #[arg(long, global = true)]
    guidance_scale: Option<f64>,
    /// Re-encode with a posterior sample instead of the mean.
    #[arg(long, global = true)]
    bridge_sample: bool,
    /// Training epochs for both VAEs.
    #[arg(long, global = true)]
    vae_epochs: Option<usize>,
    /// Training epochs for every denoiser.
    #[arg(long, global = true)]
    denoiser_epochs: Option<usize>,
    #[arg(long, global = true)]
    evaluator_epochs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset, splits and normalization statistics.
    GenData,
    /// Train (or resume) a model: vae-basic, vae-advanced, denoiser-basic,
    /// denoiser-advanced, denoiser-advanced-only, evaluator, or all.
    Train { target: String },
    /// Generate sequences with trained models.
    Sample {
        #[arg(long, default_value = "b2a")]
        mode: SampleMode,
        /// Only this condition.
        #[arg(long)]
        condition: Option<usize>,
        /// Sequences per condition.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Score generated sequences against a reference split.
    Evaluate {
        #[arg(long, default_value = "b2a")]
        mode: SampleMode,
        /// Directory of generated sequences (defaults to the mode's samples).
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        reference: ReferenceSplit,
    },
    /// Sweep rate, k or dims and write one CSV row per point.
    Ablate {
        #[arg(long)]
        axis: AblationAxis,
        /// Comma-separated values; dims values are `basic:advanced`.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
    },
    /// Print the fully resolved configuration.
    ShowConfig,
}

fn parse_split(s: &str) -> std::result::Result<ReferenceSplit, String> {
    match s {
        "train" => Ok(ReferenceSplit::Train),
        "val" => Ok(ReferenceSplit::Val),
        "test" => Ok(ReferenceSplit::Test),
        _ => Err(format!("unknown split `{s}` (train, val or test)")),
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut sets = cli.overrides.clone();
    let mut flag = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            sets.push(format!("{key}={v}"));
        }
    };
    flag("schedule.steps", cli.steps.map(|v| v.to_string()));
    flag(
        "sampler.advanced_rate",
        cli.advanced_rate.map(|v| format!("{v:?}")),
    );
    flag("sampler.k", cli.k.map(|v| v.to_string()));
    flag(
        "sampler.guidance_scale",
        cli.guidance_scale.map(|v| format!("{v:?}")),
    );
    flag(
        "sampler.bridge_sample",
        cli.bridge_sample.then(|| "true".to_string()),
    );
    for key in ["vae_basic.epochs", "vae_advanced.epochs"] {
        flag(key, cli.vae_epochs.map(|v| v.to_string()));
    }
    flag(
        "denoiser.epochs",
        cli.denoiser_epochs.map(|v| v.to_string()),
    );
    flag(
        "evaluator.epochs",
        cli.evaluator_epochs.map(|v| v.to_string()),
    );
    let mut cfg = cfg.with_overrides(&sets)?;
    if let Some(seed) = cli.seed {
        cfg.set_all_seeds(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn fmt_loss(l: Option<f64>) -> String {
    l.map_or_else(|| "-".into(), |l| format!("{l:.6}"))
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Context::new(resolve(&cli)?, cli.force);
    match cli.command {
        Command::GenData => {
            let s = commands::gen_data(&ctx)?;
            println!(
                "dataset written to {} (train {}, val {}, test {}), digest {}",
                ctx.layout().data_dir().display(),
                s.train,
                s.val,
                s.test,
                s.digest
            );
        }
        Command::Train { target } => {
            let targets = if target == "all" {
                TrainTarget::ALL.to_vec()
            } else {
                vec![target.parse::<TrainTarget>()?]
            };
            for t in targets {
                let s = commands::train(&ctx, t)?;
                if s.resumed_from >= s.epochs && s.last_loss.is_none() {
                    println!("{t}: up to date ({} epochs)", s.epochs);
                } else {
                    println!(
                        "{t}: epochs {}..{} done, last loss {}",
                        s.resumed_from,
                        s.epochs,
                        fmt_loss(s.last_loss)
                    );
                }
            }
        }
        Command::Sample {
            mode,
            condition,
            count,
        } => {
            let files = commands::sample(&ctx, mode, condition, count)?;
            println!(
                "{} sequences written to {}",
                files.len(),
                ctx.layout().samples(mode).display()
            );
        }
        Command::Evaluate {
            mode,
            generated,
            reference,
        } => {
            let r = commands::evaluate(&ctx, mode, generated.as_deref(), reference)?;
            print!("{}", r.to_text());
        }
        Command::Ablate { axis, values } => {
            let rows = commands::ablate(&ctx, axis, values.as_deref())?;
            for r in &rows {
                println!(
                    "{axis}={}: fid {:.6} top1 {:.4}",
                    r.value, r.report.fid, r.report.r_precision.top1
                );
            }
            println!(
                "sweep written to {}",
                ctx.layout().ablation(axis.as_str()).display()
            );
        }
        Command::ShowConfig => print!("{}", ctx.cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_byte(&e))
        }
    }
}

fn exit_byte(e: &Error) -> u8 {
    u8::try_from(e.exit_code()).unwrap_or(1)
}
