use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn lipdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lipdiff"))
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = lipdiff(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(args: &[&str]) -> i32 {
    lipdiff(args).status.code().expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bad_arguments_exit_with_2() {
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["synth-data"]), 2);
    assert_eq!(code(&["synth-data", "--out", "/tmp/x", "--duration", "-1"]), 2);
    assert_eq!(
        code(&["dub", "--checkpoint", "/nonexistent", "--video", "/nonexistent", "--audio", "/x.wav", "--out", "/tmp/y"]),
        2
    );
    assert_eq!(code(&["evaluate", "--generated", "/a", "--out", "/tmp/z"]), 2);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    assert_eq!(code(&["preprocess", "--dataset", s(&missing)]), 3);
    let out = tmp.path().join("run");
    assert_eq!(code(&["train", "--dataset", s(&missing), "--out", s(&out), "--epochs", "0"]), 3);
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "synth-data", "--out", s(&data), "--identities", "2", "--clips", "1", "--duration", "0.4", "--image-size", "32",
        "--seed", "3",
    ]);
    let manifest = json(&data.join("manifest.json"));
    assert_eq!(manifest["clips"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["seed"], 3);
    assert!(manifest.get("mel_stats").is_none());

    ok(&["preprocess", "--dataset", s(&data)]);
    assert!(json(&data.join("manifest.json")).get("mel_stats").is_some());
    assert!(data.join("id00_clip00/mel.feat").exists());

    // No-op training still writes a loadable checkpoint.
    let run = tmp.path().join("run");
    ok(&["train", "--dataset", s(&data), "--out", s(&run), "--image-size", "32", "--epochs", "0", "--seed", "11"]);
    let ckpt = run.join("checkpoints/step-00000000");
    let meta = json(&ckpt.join("checkpoint.json"));
    assert_eq!(meta["seed"], 11);
    assert_eq!(meta["step"], 0);
    assert_eq!(meta["fingerprint"].as_str().unwrap().len(), 64);
    assert!(ckpt.join("weights.safetensors").exists());

    // Two real steps, then the same run continued from its last checkpoint.
    let run2 = tmp.path().join("run2");
    ok(&[
        "train", "--dataset", s(&data), "--out", s(&run2), "--image-size", "32", "--max-steps", "1", "--set",
        "train.batch_size=4",
    ]);
    ok(&[
        "train", "--dataset", s(&data), "--out", s(&run2), "--image-size", "32", "--max-steps", "2", "--set",
        "train.batch_size=4", "--resume", "latest",
    ]);
    let log = std::fs::read_to_string(run2.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");
    assert!(run2.join("checkpoints/step-00000002").exists());

    let video = data.join("id00_clip00");
    let audio = data.join("id01_clip00/audio.wav");
    let ckpt2 = run2.join("checkpoints/step-00000002");
    let meta2 = json(&ckpt2.join("checkpoint.json"));
    assert_ne!(meta2["fingerprint"], meta["fingerprint"]);
    assert_eq!(
        code(&[
            "dub", "--checkpoint", s(&ckpt2), "--video", s(&video), "--audio", s(&audio), "--steps", "1000", "--out",
            s(&tmp.path().join("never")),
        ]),
        2
    );
    let dubbed = tmp.path().join("dub");
    ok(&[
        "dub", "--checkpoint", s(&ckpt2), "--video", s(&video), "--audio", s(&audio), "--steps", "3", "--seed", "5",
        "--out", s(&dubbed),
    ]);
    let result = json(&dubbed.join("result.json"));
    assert_eq!(result["steps_used"], 3);
    assert_eq!(result["seed"], 5);
    assert_eq!(result["fingerprint"], meta2["fingerprint"]);
    assert_eq!(result["num_frames"], 10);
    assert!(dubbed.join("frames/000009.png").exists());

    // Dubbed output against its source, twice: byte-identical reports.
    let r1 = tmp.path().join("eval1");
    let r2 = tmp.path().join("eval2");
    for r in [&r1, &r2] {
        ok(&["evaluate", "--generated", s(&dubbed), "--reference", s(&video), "--region", "masked", "--out", s(r)]);
    }
    assert_eq!(
        std::fs::read(r1.join("report.json")).unwrap(),
        std::fs::read(r2.join("report.json")).unwrap()
    );
    assert_eq!(
        std::fs::read(r1.join("report.csv")).unwrap(),
        std::fs::read(r2.join("report.csv")).unwrap()
    );
    let report = json(&r1.join("report.json"));
    assert_eq!(report["fingerprint"], meta2["fingerprint"]);
    assert_eq!(report["seed"], 5);

    // Identical directories score perfectly, in both region modes.
    for region in ["masked", "full"] {
        let out = tmp.path().join(format!("same-{region}"));
        ok(&[
            "evaluate", "--generated", s(&video), "--reference", s(&video), "--region", region, "--sync", "--out",
            s(&out),
        ]);
        let rep = json(&out.join("report.json"));
        let agg = &rep["aggregate"];
        assert!((agg["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(agg["psnr_db"].as_f64().unwrap(), 100.0);
        assert!(agg["frechet"].as_f64().unwrap().abs() < 1e-8, "{agg}");
        assert!(agg["sync_proxy_r"].as_f64().unwrap() > 0.9, "{agg}");
    }
}
