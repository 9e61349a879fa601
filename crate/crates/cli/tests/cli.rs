use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
data.n_train = 4
data.n_test = 3
train.epochs = 1
train.p = 2
";

fn skypart(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skypart")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let (data, run, eval, wx) = (dir.path().join("data"), dir.path().join("run"), dir.path().join("eval"), dir.path().join("wx"));

    let out = skypart(&["gen-data", "--config", path(&cfg), "--out", path(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(data.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), (4 + 4 * 4) + (3 + 3) + 3 * 4);

    let out = skypart(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["model.skck", "ema.skck", "config.cfg", "loss_log.jsonl"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(run.join("loss_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["total"].is_number());
    }

    let ckpt = run.join("model.skck");
    let out = skypart(&["eval", "--ckpt", path(&ckpt), "--data", path(&data), "--direction", "d2s", "--out", path(&eval)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(eval.join("metrics.txt")).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.contains("metric=R@1") && text.contains("direction=d2s"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    let fields: Vec<String> = json[0].as_object().unwrap().keys().cloned().collect();
    assert_eq!(fields, ["condition", "dataset", "direction", "metric", "value"]);

    let out = skypart(&["weather-eval", "--ckpt", path(&ckpt), "--data", path(&data), "--out", path(&wx)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(wx.join("weather.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 13);
    assert_eq!(fs::read_to_string(wx.join("weather.txt")).unwrap().lines().count(), 20 * 6);

    let out = skypart(&["eval", "--ckpt", path(&ckpt), "--data", path(&data), "--direction", "sideways", "--out", path(&eval)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn repeated_training_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    assert!(skypart(&["gen-data", "--config", path(&cfg), "--out", path(&data)]).status.success());
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|r| {
            let out = dir.path().join(r);
            assert!(skypart(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&out)]).status.success());
            out
        })
        .collect();
    for f in ["model.skck", "ema.skck", "loss_log.jsonl"] {
        assert_eq!(fs::read(runs[0].join(f)).unwrap(), fs::read(runs[1].join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_without_checkpoint_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.skck");
    let out = skypart(&["eval", "--ckpt", path(&missing), "--data", path(dir.path()), "--out", path(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(skypart(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "train.colour = 3\n").unwrap();
    let out = skypart(&["gen-data", "--config", path(&cfg), "--out", path(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.colour"));
    let out = skypart(&["ablate", "--flags", "drop_everything"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grad_check_passes_on_fresh_init() {
    let out = skypart(&["grad-check"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert_eq!(stdout.lines().count(), 10);
    assert!(stdout.lines().all(|l| l.ends_with(" ok")));
}
