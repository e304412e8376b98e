use std::path::Path;
use std::process::{Command, Output};

fn nvs(args: &[&str], out: &Path) -> Output {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    Command::new(env!("CARGO_BIN_EXE_nvs"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("NVS_DETERMINISTIC", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn nvs")
}

#[test]
fn help_lists_every_stage() {
    let out = Command::new(env!("CARGO_BIN_EXE_nvs")).arg("--help").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for stage in [
        "gen-data",
        "train-srt",
        "train-diffusion",
        "distill",
        "render",
        "eval",
        "report",
    ] {
        assert!(text.contains(stage), "{text}");
    }
}

#[test]
fn missing_checkpoint_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nvs(&["train-diffusion"], tmp.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("missing dependency") || err.contains("dataset") || err.contains("srt"),
        "{err}"
    );
}

#[test]
fn bad_cond_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nvs(&["gen-data", "--cond", "neither"], tmp.path());
    assert!(!out.status.success());
}

#[test]
fn stages_run_and_eval_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    for stage in ["gen-data", "train-srt", "train-diffusion", "render"] {
        let out = nvs(&[stage, "--seed", "3"], tmp.path());
        assert!(
            out.status.success(),
            "{stage}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    // sampled predictions, so eval does not need the distill stage
    let cfg = tmp.path().join("eval.toml");
    let text = std::fs::read_to_string(tmp.path().join("predictions/resolved_config.toml")).unwrap();
    std::fs::write(&cfg, text.replace("method = \"distill\"", "method = \"sample\"")).unwrap();
    let eval = || {
        Command::new(env!("CARGO_BIN_EXE_nvs"))
            .args(["eval", "--config"])
            .arg(&cfg)
            .env("NVS_DETERMINISTIC", "1")
            .output()
            .unwrap()
    };
    let first = eval();
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let a = std::fs::read(tmp.path().join("eval/metrics.csv")).unwrap();
    assert!(eval().status.success());
    let b = std::fs::read(tmp.path().join("eval/metrics.csv")).unwrap();
    assert_eq!(a, b);
    let stage: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("eval/stage.json")).unwrap()).unwrap();
    assert_eq!(stage["seed"], 3);
    assert_eq!(stage["deterministic"], true);
    let out = Command::new(env!("CARGO_BIN_EXE_nvs"))
        .args(["report", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(tmp.path().join("report/report.md").exists());
}
