use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
model.in_channels = 2
model.out_channels = 3
model.activation = softmax
model.base_channels = 4
model.stages = 2
model.head_dim = 2
model.patch = 2
model.patch_size = 8
train.steps = 3
train.batch_size = 1
train.warmup_steps = 1
train.base_lr = 0.001
data.extent = 16
data.samples = 2
data.blobs_min = 1
data.blobs_max = 2
data.radius_min = 1.5
data.radius_max = 3
";

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("factorizer-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("tiny.cfg"), TINY).unwrap();
    dir
}

fn factorizer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_factorizer")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = factorizer(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&["gen-data", "--config", s(&dir.join("tiny.cfg")), "--out", s(&data)]);
    data
}

fn train(dir: &Path, data: &Path, out: &str, seed: &str) -> String {
    let stdout = ok(&["train", "--config", s(&dir.join("tiny.cfg")), "--data", s(data), "--out", s(&dir.join(out)), "--seed", seed]);
    stdout.lines().find_map(|l| l.split("sha256 ").nth(1)).unwrap().to_string()
}

#[test]
fn end_to_end_pipeline() {
    let dir = scratch("e2e");
    let data = gen_data(&dir);
    assert!(data.join("case_000").join("label.ft").exists());
    assert!(data.join("dataset.cfg").exists());

    let a = train(&dir, &data, "run_a", "5");
    let b = train(&dir, &data, "run_b", "5");
    let c = train(&dir, &data, "run_c", "6");
    assert_eq!(a, b);
    assert_ne!(a, c);
    for f in ["final.ckpt", "train_log.tsv", "config.cfg"] {
        assert!(dir.join("run_a").join(f).exists(), "{f}");
    }
    assert_eq!(
        std::fs::read(dir.join("run_a/final.ckpt")).unwrap(),
        std::fs::read(dir.join("run_b/final.ckpt")).unwrap()
    );

    let ckpt = dir.join("run_a/final.ckpt");
    let pred = dir.join("pred");
    ok(&["infer", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&pred)]);
    assert!(pred.join("case_001").join("probabilities.ft").exists());

    let report = ok(&["eval", "--data", s(&data), "--pred", s(&pred)]);
    assert!(report.starts_with("case\tclass\tdice\thd95\n"));
    assert!(report.contains("\nall\t"));

    let ablation = ok(&["ablate", "--checkpoint", s(&ckpt), "--data", s(&data), "--plan", "t-sweep"]);
    let rows: Vec<&str> = ablation.lines().skip(1).collect();
    assert_eq!(rows.len(), 21);
    assert!(rows[0].starts_with("none\t"));
    assert_eq!(rows.iter().filter(|r| r.starts_with("t-sweep\t")).count(), 20);

    let maps = dir.join("maps");
    let index = ok(&["inspect-components", "--checkpoint", s(&ckpt), "--data", s(&data), "--layers", "1,3", "--out", s(&maps)]);
    assert_eq!(index.lines().count(), 3);
    assert!(maps.join("layer_1.ft").exists() && maps.join("layer_3.ft").exists());
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = scratch("perfect");
    let data = gen_data(&dir);
    let out = dir.join("report.tsv");
    ok(&["eval", "--data", s(&data), "--pred", s(&data), "--out", s(&out)]);
    let report = std::fs::read_to_string(out).unwrap();
    for line in report.lines().skip(1).take_while(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols[2], "1.000000", "{line}");
        assert_eq!(cols[3], "0.0000", "{line}");
    }
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn bad_invocations_fail() {
    let dir = scratch("bad");
    let cfg = dir.join("tiny.cfg");
    let out = dir.join("x");
    let (missing, nowhere) = (dir.join("missing.cfg"), dir.join("nowhere"));
    let cases: Vec<Vec<&str>> = vec![
        vec!["gen-data", "--out", s(&out), "--bogus"],
        vec!["gen-data", "--config", s(&cfg), "--out", s(&out), "--set", "data.extent=20"],
        vec!["gen-data", "--config", s(&cfg), "--out", s(&out), "--set", "nonsense.key=1"],
        vec!["gen-data", "--config", s(&cfg), "--out", s(&out), "--set", "data.blobs_min=40", "--set", "data.blobs_max=40"],
        vec!["gen-data", "--config", s(&missing), "--out", s(&out)],
        vec!["train", "--config", s(&cfg), "--data", s(&nowhere), "--out", s(&out)],
        vec!["train", "--config", s(&cfg), "--data", s(&dir), "--out", s(&out), "--set", "model.head_dim=3"],
        vec!["infer", "--checkpoint", s(&cfg), "--data", s(&dir), "--out", s(&out)],
        vec!["frobnicate"],
    ];
    for args in cases {
        let o = factorizer(&args);
        assert!(!o.status.success(), "{args:?} unexpectedly succeeded");
        assert!(!o.stderr.is_empty(), "{args:?} gave no message");
    }
    std::fs::remove_dir_all(dir).unwrap();
}
