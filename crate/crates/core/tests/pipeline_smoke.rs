use std::fs;

use nvs_core::pipeline::{run, PredictMethod, RunConfig, Stage, StageReport};
use nvs_core::Error;

fn stage_json(dir: &std::path::Path) -> StageReport {
    serde_json::from_str(&fs::read_to_string(dir.join("stage.json")).unwrap()).unwrap()
}

#[test]
fn stages_refuse_to_run_without_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::smoke(tmp.path());
    for (stage, what) in [
        (Stage::TrainSrt, "dataset"),
        (Stage::TrainDiffusion, "srt"),
        (Stage::Distill, "srt"),
        (Stage::Render, "srt"),
        (Stage::Eval, "dataset"),
        (Stage::Report, "eval metrics"),
    ] {
        match run(&cfg, stage) {
            Err(Error::MissingDependency(d)) => assert_eq!(d, what, "{}", stage.name()),
            other => panic!("{}: expected missing dependency, got {other:?}", stage.name()),
        }
    }
    run(&cfg, Stage::GenData).unwrap();
    run(&cfg, Stage::TrainSrt).unwrap();
    assert!(matches!(run(&cfg, Stage::TrainDiffusion).map(|_| ()), Ok(())));
    let mut eval = cfg.clone();
    eval.eval.method = PredictMethod::Sample;
    assert!(matches!(run(&eval, Stage::Eval), Err(Error::MissingDependency(_))));
}

#[test]
fn smoke_run_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let cfg = RunConfig::smoke(out);
    for stage in Stage::ALL {
        run(&cfg, stage).unwrap_or_else(|e| panic!("{}: {e}", stage.name()));
    }

    for dir in ["data", "srt", "diffusion", "distill", "predictions", "eval", "report"] {
        let d = out.join(dir);
        assert!(d.join("resolved_config.toml").exists(), "{dir}");
        let snapshot = RunConfig::load(d.join("resolved_config.toml")).unwrap();
        assert_eq!(snapshot.seed, cfg.seed);
    }
    for s in [stage_json(&out.join("distill")), stage_json(&out.join("predictions"))] {
        assert_eq!(s.frozen.len(), 2);
        assert!(s.frozen.iter().all(|a| a.unchanged()));
    }

    let scene = fs::read_dir(out.join("distill"))
        .unwrap()
        .flatten()
        .find(|e| e.path().is_dir())
        .unwrap();
    let v1 = scene.path().join("v1");
    assert!(v1.join("turntable_000.png").exists());
    assert!(v1.join("opacity_003.png").exists());
    assert!(v1.join("field.safetensors").exists());
    let tt: serde_json::Value = serde_json::from_str(&fs::read_to_string(v1.join("turntable.json")).unwrap()).unwrap();
    assert_eq!(tt["frames"].as_array().unwrap().len(), 4);
    assert!(tt["audit"]["terms"]
        .as_array()
        .unwrap()
        .iter()
        .all(|t| t != "input_view"));

    let metrics = fs::read_to_string(out.join("eval/metrics.csv")).unwrap();
    assert!(metrics.lines().next().unwrap().contains("psnr_a"));
    assert!(metrics.contains("MEAN"));
    assert!(out.join("eval/grid.png").exists());
    let md = fs::read_to_string(out.join("report/report.md")).unwrap();
    for col in ["1V PSNR-A", "2V SSIM-A", "3V PSNR-A"] {
        assert!(md.contains(col), "{md}");
    }
    assert!(["flat", "monotone-up", "non-monotone"]
        .iter()
        .any(|f| md.contains(&format!("trend: {f}"))));

    // eval is a pure function of the predictions and the config
    let first = fs::read(out.join("eval/metrics.csv")).unwrap();
    run(&cfg, Stage::Eval).unwrap();
    assert_eq!(first, fs::read(out.join("eval/metrics.csv")).unwrap());

    for m in [PredictMethod::Sample, PredictMethod::Srt] {
        let mut c = cfg.clone();
        c.eval.method = m;
        run(&c, Stage::Eval).unwrap();
    }
}

#[test]
fn identical_runs_give_identical_metrics() {
    let runs: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let tmp = tempfile::tempdir().unwrap();
            let mut cfg = RunConfig::smoke(tmp.path());
            cfg.eval.method = PredictMethod::Srt;
            for stage in [
                Stage::GenData,
                Stage::TrainSrt,
                Stage::TrainDiffusion,
                Stage::Render,
                Stage::Eval,
            ] {
                run(&cfg, stage).unwrap();
            }
            fs::read(tmp.path().join("eval/metrics.csv")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn shipped_configs_are_valid() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let smoke = RunConfig::load(dir.join("smoke.toml")).unwrap();
    let mut expected = RunConfig::smoke("runs/smoke");
    expected.resolve();
    let mut got = smoke.clone();
    got.resolve();
    assert_eq!(got, expected);
    let mut desk = RunConfig::load(dir.join("desk.toml")).unwrap();
    desk.resolve();
    desk.validate().unwrap();
    assert_eq!((desk.seed, desk.data.num_scenes, desk.image_size), (7, 64, 64));
    assert_eq!(
        (
            desk.srt_train.steps,
            desk.diffusion_train.steps,
            desk.distill.total_iters
        ),
        (50_000, 50_000, 3000)
    );
    assert_eq!(desk.eval.context_views, vec![1, 3, 6]);
}
