use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL_RUN: &str = r#"
[synth]
height = 32
width = 32
frames_per_video = 9
n_videos_per_class = 10

[predictor]
epochs = 1
crop = 16

[train]
max_epochs = 2
batch_size = 16
channels = 16
embed_dim = 16

[embedder]
kind = "random_patch"
dim = 16
"#;

fn tdefect(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdefect"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tdefect(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_lists_every_subcommand() {
    let text = ok(&["--help"]);
    for sub in [
        "synth",
        "ingest",
        "degrade",
        "train-predictor",
        "train",
        "eval",
        "cross-eval",
        "robustness",
        "ablate",
        "score-external",
    ] {
        assert!(text.contains(sub), "missing {sub}");
        ok(&[sub, "--help"]);
    }
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(tdefect(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(tdefect(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn missing_validation_split_is_reported() {
    let dir = TempDir::new().unwrap();
    let manifest = dir.path().join("manifest.jsonl");
    std::fs::write(
        &manifest,
        concat!(
            "{\"manifest_version\":1,\"split_seed\":0,\"split_ratio\":[0.8,0.1,0.1]}\n",
            "{\"path\":\"a.hevc\",\"label\":\"REAL\",\"generator_tag\":null,\"split\":\"TRAIN\",\"frame_count\":24}\n",
            "{\"path\":\"b.hevc\",\"label\":\"FAKE\",\"generator_tag\":\"g\",\"split\":\"TEST\",\"frame_count\":24}\n",
        ),
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = tdefect(&["train", "--manifest", p(&manifest), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error: MissingSplit:"), "{stderr}");
}

#[test]
fn external_scores_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let preds = dir.path().join("preds.jsonl");
    std::fs::write(
        &preds,
        concat!(
            "{\"clip_id\":\"a@0\",\"label\":\"FAKE\",\"probability\":0.5}\n",
            "{\"clip_id\":\"a@1\",\"label\":\"REAL\",\"probability\":0.2}\n",
            "{\"clip_id\":\"b@0\",\"label\":\"REAL\",\"probability\":0.7}\n",
            "{\"clip_id\":\"b@1\",\"label\":\"FAKE\",\"probability\":0.1}\n",
        ),
    )
    .unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["score-external", "--predictions", p(&preds), "--out", p(&a), "--seed", "3"]);
    ok(&["score-external", "--predictions", p(&preds), "--out", p(&b), "--seed", "3"]);
    let report = std::fs::read(a.join("external.json")).unwrap();
    assert_eq!(report, std::fs::read(b.join("external.json")).unwrap());
    let json: serde_json::Value = serde_json::from_slice(&report).unwrap();
    assert_eq!(json["rows"][0]["cells"][0], serde_json::json!(50.0));
    assert!(a.join("run_info.json").exists());
    assert!(a.join("config.toml").exists());
}

#[test]
fn small_pipeline_runs_end_to_end_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let d = |name: &str| dir.path().join(name);
    let config = d("run.toml");
    std::fs::write(&config, SMALL_RUN).unwrap();
    let cfg = p(&config);

    ok(&["synth", "--config", cfg, "--out", p(&d("corpus"))]);
    let manifest = d("corpus").join("manifest.jsonl");
    ok(&["ingest", "--config", cfg, "--manifest", p(&manifest), "--out", p(&d("ingest"))]);
    assert!(d("ingest").join("clips.json").exists());

    ok(&["train-predictor", "--config", cfg, "--manifest", p(&manifest), "--out", p(&d("pred"))]);
    let predictor = d("pred").join("predictor.tdck");

    let missing = tdefect(&["train", "--config", cfg, "--manifest", p(&manifest), "--out", p(&d("nopred"))]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("FrozenComponentMissing"));

    for run in ["train1", "train2"] {
        ok(&[
            "train", "--config", cfg, "--manifest", p(&manifest), "--predictor", p(&predictor), "--out", p(&d(run)),
        ]);
    }
    let ckpt = d("train1").join("detector.tdck");
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(d("train2").join("detector.tdck")).unwrap());

    for run in ["eval1", "eval2"] {
        ok(&["eval", "--config", cfg, "--manifest", p(&manifest), "--checkpoint", p(&ckpt), "--out", p(&d(run))]);
    }
    for file in ["eval.json", "eval.txt", "predictions.jsonl"] {
        assert_eq!(
            std::fs::read(d("eval1").join(file)).unwrap(),
            std::fs::read(d("eval2").join(file)).unwrap(),
            "{file} differs between identical runs"
        );
    }

    ok(&[
        "degrade", "--config", cfg, "--manifest", p(&manifest), "--operation", "H265_CRF", "--severity", "3",
        "--out", p(&d("degraded")),
    ]);
    let text = ok(&[
        "robustness", "--config", cfg, "--checkpoint", p(&ckpt), "--degraded-manifest",
        p(&d("degraded").join("manifest.jsonl")), "--out", p(&d("robust")),
    ]);
    assert!(text.contains("Raw Data"));
    assert!(text.contains("H.265 CRF"));
}
