use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::Rng;
use vtgan_cli::artifacts::read_scores;
use vtgan_core::data::{labels_to_bytes, IdxImages};
use vtgan_core::rng;

/// Tiny MNIST-shaped dataset: class c is a bright horizontal bar at row 2c+4
/// over faint noise.
fn write_dataset(root: &Path, train_per_class: usize, test_per_class: usize) {
    let dir = root.join("mnist");
    std::fs::create_dir_all(&dir).unwrap();
    let mut r = rng::stream(9, "synthetic_idx", 0);
    let mut split = |per_class: usize| {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..per_class * 10 {
            let c = (i % 10) as u8;
            for y in 0..28 {
                for x in 0..28 {
                    let bar = y == 2 * c as usize + 4 && (4..24).contains(&x);
                    pixels.push(if bar { r.random_range(200..=255) } else { r.random_range(0..30) });
                }
            }
            labels.push(c);
        }
        (IdxImages { count: per_class * 10, rows: 28, cols: 28, pixels }, labels)
    };
    for (name, n) in [("train", train_per_class), ("t10k", test_per_class)] {
        let (images, labels) = split(n);
        std::fs::write(dir.join(format!("{name}-images-idx3-ubyte")), images.to_bytes()).unwrap();
        std::fs::write(dir.join(format!("{name}-labels-idx1-ubyte")), labels_to_bytes(&labels)).unwrap();
    }
}

struct Sandbox {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    out: PathBuf,
}

impl Sandbox {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        write_dataset(&data, 64, 110);
        let out = tmp.path().join("out");
        Sandbox { _tmp: tmp, data, out }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_vtgan"))
            .args(args)
            .env("VTGAN_DATA_DIR", &self.data)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn exp(&self, cmd: &str, model: &str, extra: &[&str]) -> Output {
        let out = self.out.to_str().unwrap();
        let mut args = vec![cmd, "--model", model, "--known", "8", "--unknown", "3", "--seed", "1", "--epochs", "1", "--out", out];
        args.extend_from_slice(extra);
        self.run(&args)
    }

    fn dir(&self, model: &str) -> PathBuf {
        self.out.join(format!("mnist_8v3_{model}_s1"))
    }
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_artifacts_and_reruns_bit_identically() {
    let s = Sandbox::new();
    ok(&s.exp("train", "anogan", &[]));
    let dir = s.dir("anogan");
    for f in ["generator.ckpt", "discriminator.ckpt", "losses.csv", "run.json", "spec.json", "spec.sha256", "samples_epoch_001.pgm"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    let read = |f: &str| std::fs::read(dir.join(f)).unwrap();
    let (g, d, losses) = (read("generator.ckpt"), read("discriminator.ckpt"), read("losses.csv"));

    let again = s.exp("train", "anogan", &[]);
    assert_eq!(code(&again), 2, "overwrite without --force must be refused");
    ok(&s.exp("train", "anogan", &["--force"]));
    assert_eq!(read("generator.ckpt"), g);
    assert_eq!(read("discriminator.ckpt"), d);
    assert_eq!(read("losses.csv"), losses);

    // The spec written back out reproduces the run from a config file.
    let cfg = dir.join("spec.json");
    ok(&s.run(&["train", "--config", cfg.to_str().unwrap(), "--force"]));
    assert_eq!(read("generator.ckpt"), g);
}

#[test]
fn regime_flag_names_the_artifact_directory() {
    let s = Sandbox::new();
    let out = s.out.to_str().unwrap();
    let o = s.run(&["train", "--regime", "vtgan", "--dataset", "mnist", "--known", "8", "--unknown", "3", "--seed", "1", "--profile", "desk", "--epochs", "1", "--out", out]);
    ok(&o);
    let dir = s.dir("vtgan");
    for f in ["generator.ckpt", "weak_generator.ckpt", "weak_discriminator.ckpt", "weak_samples_epoch_001.pgm"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn usage_and_data_errors_have_distinct_exit_codes() {
    let s = Sandbox::new();
    assert_eq!(code(&s.exp("train", "bogus", &[])), 2);
    assert_eq!(code(&s.run(&["train", "--model", "anogan", "--known", "3", "--unknown", "3"])), 2);
    assert_eq!(code(&s.run(&["train", "--model", "anogan", "--known", "8", "--unknown", "3", "--dataset", "cifar"])), 2);
    let missing = s.exp("train", "anogan", &["--data-dir", "/nonexistent"]);
    assert_eq!(code(&missing), 3);
    assert!(stderr(&missing).contains("train-images-idx3-ubyte"), "{}", stderr(&missing));
    // Scoring before training is a data error.
    assert_eq!(code(&s.exp("score", "svdd", &[])), 3);
}

#[test]
fn score_limits_rows_and_dispatches_by_model() {
    let s = Sandbox::new();
    ok(&s.exp("train", "anogan", &[]));
    ok(&s.exp("score", "anogan", &["--limit", "3"]));
    let gan = read_scores(&s.dir("anogan").join("scores.csv")).unwrap();
    assert_eq!(gan.len(), 3);
    assert!(gan.iter().all(|r| r.l_r.is_some() && r.l_d.is_some() && r.restarts == Some(3)));
    assert!(s.dir("anogan").join("pairs.pgm").is_file());

    // A different feature weight changes V but not the residual column.
    ok(&s.exp("score", "anogan", &["--limit", "3", "--lambda", "0.9", "--force"]));
    let heavy = read_scores(&s.dir("anogan").join("scores.csv")).unwrap();
    for (a, b) in gan.iter().zip(&heavy) {
        assert_eq!(a.l_r, b.l_r);
        assert_eq!(a.l_d, b.l_d);
        assert_ne!(a.v, b.v);
    }
    assert_eq!(code(&s.exp("score", "anogan", &["--limit", "3", "--lambda", "1.5", "--force"])), 2);

    ok(&s.exp("train", "svdd", &[]));
    ok(&s.exp("score", "svdd", &["--limit", "10"]));
    let svdd = read_scores(&s.dir("svdd").join("scores.csv")).unwrap();
    assert_eq!(svdd.len(), 10);
    assert!(svdd.iter().all(|r| r.l_r.is_none() && r.v >= 0.0));
}

#[test]
fn fingerprint_mismatch_is_an_integrity_error() {
    let s = Sandbox::new();
    ok(&s.exp("train", "vtgan", &[]));
    let dir = s.dir("vtgan");
    std::fs::copy(dir.join("weak_generator.ckpt"), dir.join("generator.ckpt")).unwrap();
    let o = s.exp("score", "vtgan", &["--limit", "2"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));

    // Changing the spec after training is caught too.
    let o = s.exp("score", "vtgan", &["--limit", "2", "--profile", "paper"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
}

#[test]
fn eval_builds_one_row_per_pair() {
    let s = Sandbox::new();
    for m in ["iforest", "svdd"] {
        ok(&s.exp("train", m, &[]));
        ok(&s.exp("score", m, &[]));
    }
    let a = s.dir("iforest").join("scores.csv");
    let b = s.dir("svdd").join("scores.csv");
    let table = s.out.join("table.csv");
    let o = s.run(&["eval", a.to_str().unwrap(), b.to_str().unwrap(), "--table", table.to_str().unwrap()]);
    ok(&o);
    let text = std::fs::read_to_string(&table).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "known,unknown,IF,AnoGAN,NoiseGAN,DeepSVDD,VTGAN");
    assert_eq!(lines.len(), 2, "{text}");
    let cells: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(&cells[..2], ["8", "3"]);
    assert!(!cells[2].is_empty() && !cells[5].is_empty());
    assert!(cells[3].is_empty() && cells[4].is_empty() && cells[6].is_empty());
}

#[test]
fn eval_rejects_bad_inputs() {
    let s = Sandbox::new();
    ok(&s.exp("train", "svdd", &[]));
    ok(&s.exp("score", "svdd", &["--limit", "5"]));
    let scores = s.dir("svdd").join("scores.csv");
    let meta = s.dir("svdd").join("scores.meta.json");
    let text = std::fs::read_to_string(&scores).unwrap();

    // Every row relabelled as known.
    let single: String = text.lines().take(1).chain(text.lines().skip(1).map(|_| "1,0,0.5,,,")).map(|l| format!("{l}\n")).collect();
    std::fs::write(&scores, single).unwrap();
    let o = s.run(&["eval", scores.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("evaluation error"), "{}", stderr(&o));

    let mut broken = text.clone();
    broken.push_str("9,1,not-a-number,,,\n");
    std::fs::write(&scores, &broken).unwrap();
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&meta).unwrap()).unwrap();
    let mut m6 = m.clone();
    m6["count"] = 6.into();
    std::fs::write(&meta, m6.to_string()).unwrap();
    let o = s.run(&["eval", scores.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("line 7"), "{}", stderr(&o));

    // A second file from another dataset cannot join the same table.
    std::fs::write(&scores, &text).unwrap();
    std::fs::write(&meta, m.to_string()).unwrap();
    let other = s.out.join("other");
    std::fs::create_dir_all(&other).unwrap();
    std::fs::write(other.join("scores.csv"), &text).unwrap();
    let mut fm = m.clone();
    fm["dataset"] = "fashion_mnist".into();
    std::fs::write(other.join("scores.meta.json"), fm.to_string()).unwrap();
    let o = s.run(&["eval", scores.to_str().unwrap(), other.join("scores.csv").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    // A scores file whose metadata disagrees with its directory's spec.
    let mut wrong = m.clone();
    wrong["spec_hash"] = "00".into();
    std::fs::write(&meta, wrong.to_string()).unwrap();
    assert_eq!(code(&s.run(&["eval", scores.to_str().unwrap()])), 5);

    assert_eq!(code(&s.run(&["eval"])), 2);
}

#[test]
fn similarity_writes_a_ten_by_ten_matrix() {
    let s = Sandbox::new();
    let out = s.out.to_str().unwrap();
    ok(&s.run(&["similarity", "--seed", "2", "--epochs", "1", "--out", out]));
    let dir = s.out.join("mnist_similarity_s2");
    let csv = std::fs::read_to_string(dir.join("confusion.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 11);
    assert!(lines.iter().all(|l| l.split(',').count() == 11));
    let pairs: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("pairs.json")).unwrap()).unwrap();
    assert!(pairs["suggested"].as_array().unwrap().len() <= 3);
    assert!(dir.join("metric.ckpt").is_file() && dir.join("spec.sha256").is_file());
    assert_eq!(code(&s.run(&["similarity", "--seed", "2", "--epochs", "1", "--out", out])), 2);
}
