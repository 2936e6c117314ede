use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nnkit::data::{write_idx_images, write_idx_labels};
use nnkit::model::{Checkpoint, Dtype, Model, ModelSpec};

const SMALL: &str = "input 28 28 1
conv filters=2 kernel=3 stride=2 act=relu
flatten
dense units=16 act=relu
dense units=10 act=softmax
[train]
optimizer=adam eta=0.01 batch=16 iters=40 seed=7 eval_every=20
";

fn nnkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nnkit")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Digit `k` lights up a bar at row `2k + 4`, plus deterministic speckle.
fn write_split(dir: &Path, prefix: &str, n: usize) {
    let mut px = vec![0u8; n * 784];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = (i * 7 + 3) % 10;
        labels.push(k as u8);
        let img = &mut px[i * 784..(i + 1) * 784];
        for c in 4..24 {
            img[(2 * k + 4) * 28 + c] = 255;
        }
        for j in 0..20 {
            img[(i * 31 + j * 17) % 784] = 90;
        }
    }
    write_idx_images(&dir.join(format!("{prefix}-images-idx3-ubyte")), n, 28, 28, &px).unwrap();
    write_idx_labels(&dir.join(format!("{prefix}-labels-idx1-ubyte")), &labels).unwrap();
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        fs::create_dir(&data).unwrap();
        write_split(&data, "train", 300);
        write_split(&data, "t10k", 120);
        fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn train(&self, extra: &[&str]) -> Output {
        let (cfg, data) = (self.s("small.cfg"), self.s("data"));
        let mut args = vec!["train", "--config", &cfg, "--data-dir", &data, "--threads", "1"];
        args.extend_from_slice(extra);
        nnkit(&args)
    }
}

fn workspace_file(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel).to_string_lossy().into_owned()
}

#[test]
fn count_params_on_the_committed_configs() {
    let o = nnkit(&["count-params", "--config", &workspace_file("configs/rgb64_five_class.cfg")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.trim_end().ends_with("total 24097"), "{out}");
    for n in ["760", "1820", "840", "20512", "165"] {
        assert!(out.lines().any(|l| l.split_whitespace().last() == Some(n)), "{n} missing from\n{out}");
    }
    let o = nnkit(&["count-params", "--config", &workspace_file("configs/cnn.cfg")]);
    assert!(stdout(&o).trim_end().ends_with("total 410250"));
    let o = nnkit(&["count-params", "--config", &workspace_file("configs/mlp.cfg")]);
    assert!(stdout(&o).trim_end().ends_with("total 52650"));
    let o = nnkit(&["count-params", "--config", &workspace_file("configs/shallow.cfg")]);
    assert!(stdout(&o).trim_end().ends_with("total 7850"));
}

#[test]
fn usage_errors_exit_1_without_touching_outputs() {
    let f = Fixture::new();
    let ck = f.path("model.ck");
    fs::write(&ck, b"keep me").unwrap();
    let ck_s = f.s("model.ck");

    let o = f.train(&["--checkpoint-out", &ck_s, "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(1));
    let o = f.train(&["--checkpoint-out", &ck_s, "--dropout-convention", "sideways"]);
    assert_eq!(o.status.code(), Some(1));
    let o = f.train(&["--checkpoint-out", &ck_s, "--freeze-below", "99"]);
    assert_eq!(o.status.code(), Some(1));
    let o = nnkit(&["train", "--config", &f.s("small.cfg")]);
    assert_eq!(o.status.code(), Some(1), "missing --checkpoint-out");
    assert_eq!(fs::read(&ck).unwrap(), b"keep me");

    let metrics = f.s("metrics.csv");
    fs::write(f.path("bad.cfg"), "input 28 28 1\nflatten\ndense units=ten\n").unwrap();
    let o = nnkit(&["train", "--config", &f.s("bad.cfg"), "--checkpoint-out", &ck_s, "--metrics-out", &metrics]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
    assert!(!f.path("metrics.csv").exists());
    assert_eq!(fs::read(&ck).unwrap(), b"keep me");
}

#[test]
fn missing_and_corrupt_files_exit_2() {
    let f = Fixture::new();
    let o = nnkit(&["train", "--config", &f.s("small.cfg"), "--data-dir", &f.s("nowhere"), "--checkpoint-out", &f.s("m.ck")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
    assert!(!f.path("m.ck").exists());

    let o = nnkit(&["count-params", "--config", &f.s("absent.cfg")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.cfg"));

    fs::write(f.path("junk.ck"), b"NOPE0000").unwrap();
    let o = nnkit(&["eval", "--config", &f.s("small.cfg"), "--data-dir", &f.s("data"), "--checkpoint-in", &f.s("junk.ck")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn zero_iterations_save_the_initialization() {
    let f = Fixture::new();
    let o = f.train(&["--iters", "0", "--checkpoint-out", &f.s("init.ck"), "--seed", "11"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut spec: ModelSpec = SMALL.parse().unwrap();
    spec.train.seed = 11;
    let expected = Checkpoint::from_model(&Model::build(&spec).unwrap(), Dtype::F64).to_bytes();
    assert_eq!(fs::read(f.path("init.ck")).unwrap(), expected);
}

#[test]
fn eval_reproduces_the_final_training_accuracy() {
    let f = Fixture::new();
    let o = f.train(&["--checkpoint-out", &f.s("m.ck"), "--metrics-out", &f.s("m.csv")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(f.path("m.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iter,loss,train_acc,test_acc,eta");
    assert_eq!(lines.len(), 41);
    assert!(lines[20].starts_with("20,") && !lines[20].ends_with(",,0.01"));
    let final_acc = lines[40].split(',').nth(3).unwrap();

    let o = nnkit(&["eval", "--config", &f.s("small.cfg"), "--data-dir", &f.s("data"), "--checkpoint-in", &f.s("m.ck"), "--threads", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l == format!("accuracy {final_acc}")), "{out} vs {final_acc}");
    assert!(out.contains("samples 120"));
}

#[test]
fn training_is_bit_reproducible() {
    let f = Fixture::new();
    for run in ["a", "b"] {
        let o = f.train(&["--checkpoint-out", &f.s(&format!("{run}.ck")), "--metrics-out", &f.s(&format!("{run}.csv"))]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(f.path("a.csv")).unwrap(), fs::read(f.path("b.csv")).unwrap());
    assert_eq!(fs::read(f.path("a.ck")).unwrap(), fs::read(f.path("b.ck")).unwrap());
    let o = f.train(&["--checkpoint-out", &f.s("c.ck"), "--metrics-out", &f.s("c.csv"), "--seed", "8"]);
    assert!(o.status.success());
    assert_ne!(fs::read(f.path("a.csv")).unwrap(), fs::read(f.path("c.csv")).unwrap());
}

#[test]
fn fine_tuning_with_a_new_head() {
    let f = Fixture::new();
    assert!(f.train(&["--checkpoint-out", &f.s("base.ck")]).status.success());
    // Same trunk, five output classes, everything below the head frozen.
    let five = SMALL.replace("dense units=10", "dense units=5");
    fs::write(f.path("five.cfg"), &five).unwrap();
    let (cfg, data) = (f.s("five.cfg"), f.s("data"));
    let bad = nnkit(&["train", "--config", &cfg, "--data-dir", &data, "--checkpoint-in", &f.s("base.ck"), "--checkpoint-out", &f.s("ft.ck")]);
    assert_eq!(bad.status.code(), Some(2), "head shape differs, so it must be replaced");

    // Labels above 4 do not fit a 5-class head; the data check reports it.
    let o = nnkit(&[
        "train", "--config", &cfg, "--data-dir", &data, "--checkpoint-in", &f.s("base.ck"),
        "--checkpoint-out", &f.s("ft.ck"), "--replace", "5", "--freeze-below", "7",
    ]);
    assert_ne!(o.status.code(), Some(0));

    let o = nnkit(&[
        "train", "--config", &f.s("small.cfg"), "--data-dir", &data, "--checkpoint-in", &f.s("base.ck"),
        "--checkpoint-out", &f.s("ft.ck"), "--replace", "5", "--freeze-below", "7",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let base = Checkpoint::load(&f.path("base.ck")).unwrap();
    let ft = Checkpoint::load(&f.path("ft.ck")).unwrap();
    for name in ["0.filters", "0.bias", "3.weight", "3.bias"] {
        assert_eq!(base.get(name).unwrap().data(), ft.get(name).unwrap().data(), "{name}");
    }
    assert_ne!(base.get("5.weight").unwrap().data(), ft.get("5.weight").unwrap().data());
}

#[test]
fn extract_and_attack_write_csv() {
    let f = Fixture::new();
    assert!(f.train(&["--checkpoint-out", &f.s("m.ck")]).status.success());
    let (cfg, data, ck) = (f.s("small.cfg"), f.s("data"), f.s("m.ck"));
    let o = nnkit(&["extract", "--config", &cfg, "--data-dir", &data, "--checkpoint-in", &ck, "--out", &f.s("feat.csv"), "--limit", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let feats = fs::read_to_string(f.path("feat.csv")).unwrap();
    let rows: Vec<&str> = feats.lines().collect();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows[0].split(',').count(), 17, "label plus the 16 penultimate units");

    let o = nnkit(&["extract", "--config", &cfg, "--data-dir", &data, "--checkpoint-in", &ck, "--out", &f.s("x.csv"), "--tap", "40"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!f.path("x.csv").exists());

    let out = f.s("rob.csv");
    let args = ["attack", "--config", &cfg, "--data-dir", &data, "--checkpoint-in", &ck, "--out", &out, "--epsilons", "0,0.04,0.2", "--limit", "100"];
    let o = nnkit(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(f.path("rob.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "epsilon,adv_accuracy");
    let first = fs::read(f.path("rob.csv")).unwrap();
    assert!(nnkit(&args).status.success());
    assert_eq!(fs::read(f.path("rob.csv")).unwrap(), first);

    let o = nnkit(&["attack", "--config", &cfg, "--data-dir", &data, "--checkpoint-in", &ck, "--out", &out, "--mode", "zigzag"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn inspect_data_reports_shapes() {
    let f = Fixture::new();
    let o = nnkit(&["inspect-data", "--data-dir", &f.s("data")]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("train: images [300, 28, 28, 1] labels [300, 10]"), "{out}");
    assert!(out.contains("test: images [120, 28, 28, 1]"));
}
