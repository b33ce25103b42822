//! Command-layer workflow: training resumes exactly, checkpoints guard
//! against configuration drift, and samples carry their provenance.

use b2a_hdm::checkpoint::Checkpoint;
use b2a_hdm::commands::{self, Context, ReferenceSplit, TrainTarget};
use b2a_hdm::config::RunConfig;
use b2a_hdm::dataset::read_sequence;
use b2a_hdm::pipeline::SampleMode;
use b2a_hdm::Error;

fn tiny(dir: &std::path::Path, overrides: &[&str]) -> RunConfig {
    let mut sets: Vec<String> = [
        "schedule.steps=12",
        "data.count=240",
        "vae_basic.epochs=2",
        "vae_advanced.epochs=2",
        "denoiser.epochs=2",
        "evaluator.epochs=2",
        "metrics.diversity_pairs=10",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    sets.extend(overrides.iter().map(|s| s.to_string()));
    let mut cfg = RunConfig::default().with_overrides(&sets).unwrap();
    cfg.output.dir = dir.to_path_buf();
    cfg
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let full = Context::new(tiny(a.path(), &["vae_basic.epochs=4"]), false);
    commands::gen_data(&full).unwrap();
    commands::train(&full, TrainTarget::VaeBasic).unwrap();

    let first = Context::new(tiny(b.path(), &["vae_basic.epochs=2"]), false);
    commands::gen_data(&first).unwrap();
    commands::train(&first, TrainTarget::VaeBasic).unwrap();
    let rest = Context::new(tiny(b.path(), &["vae_basic.epochs=4"]), false);
    let s = commands::train(&rest, TrainTarget::VaeBasic).unwrap();
    assert_eq!((s.resumed_from, s.epochs), (2, 4));

    let name = "checkpoints/vae-basic.ckpt";
    let ca = Checkpoint::load(&a.path().join(name)).unwrap();
    let cb = Checkpoint::load(&b.path().join(name)).unwrap();
    assert_eq!(ca.tensors, cb.tensors);
    let curve =
        |d: &std::path::Path| std::fs::read_to_string(d.join("curves/vae-basic.csv")).unwrap();
    assert_eq!(curve(a.path()), curve(b.path()));

    // Nothing left to do on a second call.
    let again = commands::train(&rest, TrainTarget::VaeBasic).unwrap();
    assert_eq!(again.last_loss, None);
}

#[test]
fn changed_settings_conflict_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = Context::new(tiny(dir.path(), &[]), false);
    commands::gen_data(&ctx).unwrap();
    commands::train(&ctx, TrainTarget::VaeBasic).unwrap();
    let changed = Context::new(tiny(dir.path(), &["vae_basic.lr=0.01"]), false);
    let err = commands::train(&changed, TrainTarget::VaeBasic).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
    let forced = Context::new(changed.cfg.clone(), true);
    let s = commands::train(&forced, TrainTarget::VaeBasic).unwrap();
    assert_eq!(s.resumed_from, 0);
}

#[test]
fn sample_and_evaluate_write_reports_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = Context::new(tiny(dir.path(), &[]), false);
    commands::gen_data(&ctx).unwrap();
    for t in TrainTarget::ALL {
        commands::train(&ctx, t).unwrap();
    }
    let files = commands::sample(&ctx, SampleMode::B2a, None, Some(2)).unwrap();
    assert_eq!(files.len(), 2 * ctx.cfg.num_labels());
    let (seq, header) = read_sequence(&files[3]).unwrap();
    assert_eq!(seq.label, Some(1));
    assert!(header.provenance.contains("mode = \"b2a\""));
    assert!(header.provenance.contains("advanced_rate = 0.95"));
    assert!(RunConfig::from_toml(header.provenance.split("[run]\n").nth(1).unwrap()).is_ok());

    let one = commands::sample(&ctx, SampleMode::BasicOnly, Some(5), Some(3)).unwrap();
    assert_eq!(one.len(), 3);
    assert!(matches!(
        commands::sample(&ctx, SampleMode::BasicOnly, Some(999), None),
        Err(Error::Config(_))
    ));
    assert!(commands::sample(&ctx, SampleMode::B2a, None, Some(0))
        .unwrap()
        .is_empty());

    let r = commands::evaluate(&ctx, SampleMode::B2a, None, ReferenceSplit::Test).unwrap();
    assert_eq!(r.generated_count, files.len());
    assert!(r.fid.is_finite() && r.fid >= 0.0);
    let layout = ctx.layout();
    let text = std::fs::read_to_string(layout.report("b2a-vs-test")).unwrap();
    assert_eq!(
        b2a_hdm::pipeline::MetricReport::from_text(&text)
            .unwrap()
            .max_abs_diff(&r),
        0.0
    );
    assert!(layout.report("b2a-vs-test").with_extension("csv").exists());
    assert!(layout
        .report("b2a-vs-test")
        .with_extension("config.toml")
        .exists());
}
