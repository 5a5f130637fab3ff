use std::path::Path;
use std::process::{Command, Output};

fn s2tdpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s2tdpt")).args(args).env("S2TDPT_THREADS", "1").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = s2tdpt(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], code: i32, category: &str) {
    let out = s2tdpt(args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {stderr}");
    assert!(stderr.starts_with(&format!("error[{category}]: ")), "{args:?}: {stderr}");
}

const SMALL: &[&str] = &[
    "--set",
    "model.depth=1",
    "--set",
    "model.embed_dim=16",
    "--set",
    "model.stem_channels=4",
    "--set",
    "model.sps_stages=spe:8,sped:16,sped:16",
    "--set",
    "attention.heads=2",
    "--set",
    "train.epochs=2",
    "--set",
    "train.batch_size=8",
];

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn train_into(data: &Path, out: &Path, seed: &str) {
    let mut args = vec!["train", "--data", p(data), "--out", p(out), "--seed", seed];
    args.extend_from_slice(SMALL);
    ok(&args);
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["gen-data", "--seed", "3", "--out", p(&data), "--n-per-class", "6", "--test-per-class", "3"]);
    assert_eq!(std::fs::metadata(data.join("train.bin")).unwrap().len(), 24 * (1 + 3 * 16 * 16));
    assert_eq!(std::fs::metadata(data.join("test.bin")).unwrap().len(), 12 * (1 + 3 * 16 * 16));

    train_into(&data, &run, "5");
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "# seed = 5");
    assert_eq!(lines[1], "epoch,train_loss,train_acc,eval_acc,wall_seconds");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("1,"));
    let config = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(config.contains("model.depth = 1") && config.contains("train.seed = 5"));

    let ckpt = run.join("model.ckpt");
    let common = ["--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&run)];
    let stdout = ok(&[&["eval"][..], &common].concat());
    assert!(stdout.starts_with("top1 "));
    let eval: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    let top1 = eval["top1_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&top1));
    assert_eq!(eval["seed"], 5);
    let confusion = std::fs::read_to_string(run.join("confusion.csv")).unwrap();
    let total: u64 = confusion
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .flat_map(|l| l.split(',').skip(1).map(|v| v.parse::<u64>().unwrap()).collect::<Vec<_>>())
        .sum();
    assert_eq!(total, 12);

    ok(&[&["profile", "--sample-size", "4"][..], &common].concat());
    let energy: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("energy.json")).unwrap()).unwrap();
    assert_eq!(energy["sample_size"], 4);
    assert_eq!(energy["timesteps"], 4);
    let snn = energy["energy_mj_snn"].as_f64().unwrap();
    let ann = energy["energy_mj_ann"].as_f64().unwrap();
    assert!(snn > 0.0 && snn < ann, "{snn} vs {ann}");
    assert!(std::fs::read_to_string(run.join("energy.txt")).unwrap().starts_with("# seed = 5\n"));

    ok(&[&["export-sfr", "--index", "2"][..], &common].concat());
    let pgm = std::fs::read_to_string(run.join("sfr.pgm")).unwrap();
    let body: Vec<&str> = pgm.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body[0], "P2");
    assert_eq!(body[1], "4 4");
    assert_eq!(body[2], "255");
    let csv = std::fs::read_to_string(run.join("sfr.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 4);

    ok(&[&["inspect-attention"][..], &common].concat());
    let att: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("attention.json")).unwrap()).unwrap();
    let shape: Vec<u64> = att["shape"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(shape, [1, 4, 1, 2, 16, 16]);
    let values = att["values"].as_array().unwrap();
    assert_eq!(values.len() as u64, shape.iter().product::<u64>());
    // The f32 model forms its bounds as 0.5 - 0.4 and 0.5 + 0.4 in f32.
    let (lo, hi) = (0.5f32 - 0.4f32, 0.5f32 + 0.4f32);
    let bad: Vec<f32> = values.iter().map(|v| v.as_f64().unwrap() as f32).filter(|v| !(lo..=hi).contains(v)).take(5).collect();
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--out", p(&data), "--n-per-class", "4", "--test-per-class", "1"]);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_into(&data, &a, "9");
    train_into(&data, &b, "9");
    assert_eq!(std::fs::read(a.join("model.ckpt")).unwrap(), std::fs::read(b.join("model.ckpt")).unwrap());
}

#[test]
fn error_categories_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--out", p(&data), "--n-per-class", "2", "--test-per-class", "1"]);
    let missing = dir.path().join("nope.ckpt");

    fails(&["frobnicate"], 2, "USAGE");
    fails(&["eval", "--bogus"], 2, "USAGE");
    fails(&["eval", "--checkpoint", p(&missing), "--data", p(&data)], 2, "CONFIG");
    fails(&["eval", "--data", p(&data)], 2, "CONFIG");
    fails(&["train", "--data", p(&data), "--out", p(dir.path()), "--set", "model.colour=red"], 2, "CONFIG");
    fails(&["train", "--data", p(&data), "--out", p(dir.path()), "--set", "attention.w_offset=0.3"], 2, "CONFIG");
    fails(&["train", "--data", p(&data), "--out", p(dir.path()), "--set", "model.height=8"], 2, "CONFIG");

    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    fails(&["eval", "--checkpoint", p(&bad), "--data", p(&data)], 1, "FORMAT");

    let env = Command::new(env!("CARGO_BIN_EXE_s2tdpt")).args(["--help"]).env("S2TDPT_THREADS", "zero").output().unwrap();
    assert!(env.status.success());
    let threads = Command::new(env!("CARGO_BIN_EXE_s2tdpt"))
        .args(["eval", "--checkpoint", p(&missing)])
        .env("S2TDPT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
}

#[test]
fn architecture_overrides_rejected_on_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["gen-data", "--out", p(&data), "--n-per-class", "2", "--test-per-class", "1"]);
    let mut args = vec!["train", "--data", p(&data), "--out", p(&run)];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--set", "train.epochs=1"]);
    ok(&args);
    let ckpt = run.join("model.ckpt");
    fails(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--set", "model.depth=3"], 2, "CONFIG");
}
