//! Exit codes and error messages of the `b2a` binary.

use std::path::Path;
use std::process::{Command, Output};

fn b2a(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_b2a"))
        .args(args)
        .arg("--out")
        .arg(out)
        .args([
            "--steps",
            "10",
            "--vae-epochs",
            "1",
            "--denoiser-epochs",
            "1",
            "--evaluator-epochs",
            "1",
        ])
        .args(["--set", "data.count=240"])
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_prerequisites_exit_3_with_a_hint() {
    let dir = tempfile::tempdir().unwrap();
    let o = b2a(dir.path(), &["train", "vae-basic"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("gen-data"), "{}", stderr(&o));

    assert_eq!(code(&b2a(dir.path(), &["gen-data"])), 0);
    let o = b2a(dir.path(), &["sample"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("b2a train"), "{}", stderr(&o));
    let o = b2a(dir.path(), &["evaluate"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[sampler]\nspeed = 3\n").unwrap();
    let o = b2a(
        dir.path(),
        &["show-config", "--config", bad.to_str().unwrap()],
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("speed"), "{}", stderr(&o));

    assert_eq!(code(&b2a(dir.path(), &["show-config", "--k", "0"])), 2);
    assert_eq!(
        code(&b2a(dir.path(), &["show-config", "--set", "nope.x=1"])),
        2
    );
    assert_eq!(
        code(&b2a(
            dir.path(),
            &["show-config", "--advanced-rate", "0.01"]
        )),
        2
    );
    assert_eq!(code(&b2a(dir.path(), &["train", "everything"])), 2);
    assert_eq!(
        code(&b2a(dir.path(), &["ablate", "--axis", "k", "--values", ""])),
        2
    );
}

#[test]
fn show_config_reflects_flags_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = b2a(
        dir.path(),
        &["show-config", "--seed", "9", "--guidance-scale", "2.5"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let cfg = b2a_hdm::config::RunConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.seeds.sample, 9);
    assert_eq!(cfg.sampler.guidance_scale, 2.5);
    assert_eq!(cfg.schedule.steps, 10);
    assert_eq!(cfg.output.dir, dir.path());
}

#[test]
fn conflicting_data_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&b2a(dir.path(), &["gen-data"])), 0);
    // Same configuration: rerun is fine.
    assert_eq!(code(&b2a(dir.path(), &["gen-data"])), 0);
    let o = b2a(dir.path(), &["gen-data", "--seed", "5"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    assert_eq!(
        code(&b2a(dir.path(), &["gen-data", "--seed", "5", "--force"])),
        0
    );
}
