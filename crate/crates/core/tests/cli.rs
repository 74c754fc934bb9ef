mod common;

use std::fs;
use std::path::{Path, PathBuf};

use histmatch::dataset::{load_manifest, synthetic_manifest, GRAPEVINE_STRATUM_COUNTS};
use histmatch::hist::{normalize_histogram, Cdf, Channel};
use histmatch::imageio::load_image;
use histmatch::reference::load_reference;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Corpus {
    _dir: tempfile::TempDir,
    root: PathBuf,
    manifest: PathBuf,
}

impl Corpus {
    fn new(n: usize, seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let csv = common::write_corpus(&mut rng, &root.join("data"), n);
        let manifest = root.join("data/manifest.csv");
        fs::write(&manifest, csv).unwrap();
        Self {
            _dir: dir,
            root,
            manifest,
        }
    }

    fn path(&self, rel: &str) -> String {
        self.root.join(rel).to_string_lossy().into_owned()
    }

    fn manifest(&self) -> String {
        self.manifest.to_string_lossy().into_owned()
    }

    fn build_ref(&self) -> String {
        let profile = self.path("profile.json");
        let out = common::histmatch(&["build-ref", &self.manifest(), "--out", &profile]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        profile
    }
}

fn stderr(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn help_for_every_subcommand() {
    for cmd in [
        "build-ref",
        "preprocess",
        "augment",
        "split",
        "score",
        "inspect",
    ] {
        let out = common::histmatch(&[cmd, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{cmd}");
        assert!(stdout(&out).contains("Usage"), "{cmd}");
    }
}

#[test]
fn unknown_flag_exits_2() {
    assert_eq!(
        common::histmatch(&["split", "m.csv", "--out", "f", "--nope"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(common::histmatch(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn build_ref_writes_loadable_profile() {
    let c = Corpus::new(30, 1);
    let profile = c.build_ref();
    let p = load_reference(Path::new(&profile)).unwrap();
    assert_eq!(p.image_count(), 30);
    assert_eq!(p.bins(), 256);
}

#[test]
fn build_ref_missing_manifest_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.csv");
    let out = common::histmatch(&[
        "build-ref",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("p.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("absent.csv"));
}

#[test]
fn build_ref_missing_image_is_data_error() {
    let c = Corpus::new(6, 2);
    let mut text = fs::read_to_string(&c.manifest).unwrap();
    text.push_str("healthy/canopy/ghost.png,healthy,canopy\n");
    fs::write(&c.manifest, text).unwrap();
    let out = common::histmatch(&["build-ref", &c.manifest(), "--out", &c.path("p.json")]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("ghost.png"), "{}", stderr(&out));
}

#[test]
fn build_ref_uses_training_portion_of_fold() {
    let c = Corpus::new(30, 3);
    let folds = c.path("folds.csv");
    let out = common::histmatch(&["split", &c.manifest(), "--k", "5", "--out", &folds]);
    assert_eq!(out.status.code(), Some(0));
    let held_out = fs::read_to_string(&folds)
        .unwrap()
        .lines()
        .skip(1)
        .filter(|l| l.ends_with(",2"))
        .count();
    let profile = c.path("train.json");
    let out = common::histmatch(&[
        "build-ref",
        &c.manifest(),
        "--out",
        &profile,
        "--filter-fold",
        &folds,
        "--train-fold",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(
        load_reference(Path::new(&profile)).unwrap().image_count(),
        30 - held_out
    );

    let out = common::histmatch(&[
        "build-ref",
        &c.manifest(),
        "--out",
        &profile,
        "--filter-fold",
        &folds,
        "--train-fold",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn preprocess_clean_corpus() {
    let c = Corpus::new(12, 4);
    let profile = c.build_ref();
    let out_dir = c.path("pre");
    let out = common::histmatch(&[
        "preprocess",
        &c.manifest(),
        "--ref",
        &profile,
        "--out",
        &out_dir,
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(common::tree(Path::new(&out_dir)).len(), 12);
}

#[test]
fn preprocess_resize() {
    let c = Corpus::new(6, 5);
    let profile = c.build_ref();
    let out_dir = c.path("pre");
    let out = common::histmatch(&[
        "preprocess",
        &c.manifest(),
        "--ref",
        &profile,
        "--out",
        &out_dir,
        "--resize",
        "128",
        "--emit-manifest",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let m = load_manifest(&Path::new(&out_dir).join("manifest.csv")).unwrap();
    assert_eq!(m.len(), 6);
    for e in m.entries() {
        let img = load_image(&m.resolve(e)).unwrap();
        assert_eq!((img.width(), img.height()), (128, 128));
    }
}

#[test]
fn preprocess_partial_failure_exits_4() {
    let c = Corpus::new(6, 6);
    let profile = c.build_ref();
    let first = fs::read_to_string(&c.manifest)
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .to_string();
    let rel = first.split(',').next().unwrap();
    fs::write(c.root.join("data").join(rel), b"not a png").unwrap();
    let out = common::histmatch(&[
        "preprocess",
        &c.manifest(),
        "--ref",
        &profile,
        "--out",
        &c.path("pre"),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).contains("1 failed"), "{}", stderr(&out));
    assert_eq!(common::tree(&c.root.join("pre")).len(), 5);
}

#[test]
fn preprocess_refuses_to_overwrite_without_flag() {
    let c = Corpus::new(3, 7);
    let profile = c.build_ref();
    let args = [
        "preprocess",
        &c.manifest(),
        "--ref",
        &profile,
        "--out",
        &c.path("pre"),
    ];
    assert_eq!(common::histmatch(&args).status.code(), Some(0));
    assert_eq!(common::histmatch(&args).status.code(), Some(4));
    let mut again = args.to_vec();
    again.push("--overwrite");
    assert_eq!(common::histmatch(&again).status.code(), Some(0));
}

#[test]
fn augment_closed_gate_copies_inputs() {
    let c = Corpus::new(9, 8);
    let out_dir = c.path("aug");
    let out = common::histmatch(&[
        "augment",
        &c.manifest(),
        "--pool",
        &c.manifest(),
        "--out",
        &out_dir,
        "--prob",
        "0",
        "--emit-untriggered",
        "copy",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let mut inputs = common::tree(&c.root.join("data"));
    inputs.remove(Path::new("manifest.csv"));
    assert_eq!(common::tree(Path::new(&out_dir)), inputs);
}

#[test]
fn augment_same_seed_same_tree() {
    let c = Corpus::new(12, 9);
    let run = |name: &str, seed: &str| {
        let dir = c.path(name);
        let out = common::histmatch(&[
            "--seed",
            seed,
            "augment",
            &c.manifest(),
            "--pool",
            &c.manifest(),
            "--out",
            &dir,
        ]);
        assert_eq!(out.status.code(), Some(0));
        common::tree(Path::new(&dir))
    };
    let a = run("a", "5");
    assert_eq!(a, run("b", "5"));
    assert_ne!(a, run("c", "6"));
}

#[test]
fn augment_full_probability_dominates_chosen_reference() {
    let c = Corpus::new(9, 10);
    let out_dir = c.path("aug");
    let log = c.path("log.csv");
    let out = common::histmatch(&[
        "augment",
        &c.manifest(),
        "--pool",
        &c.manifest(),
        "--out",
        &out_dir,
        "--prob",
        "1",
        "--log",
        &log,
        "--cache-pool",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let data = c.root.join("data");
    let log_text = fs::read_to_string(&log).unwrap();
    let rows: Vec<&str> = log_text.lines().skip(1).collect();
    assert_eq!(rows.len(), 9);
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[1], "true");
        let src = load_image(&data.join(f[0])).unwrap();
        let reference = load_image(&data.join(f[3]))
            .unwrap()
            .channel_cdfs()
            .unwrap();
        let matched = load_image(&histmatch::pipeline::png_output_path(
            Path::new(&out_dir),
            f[0],
        ))
        .unwrap();
        let hists = src.channel_histograms().unwrap();
        for ch in Channel::ALL {
            let m = normalize_histogram(&hists[ch.index()]).unwrap().max_prob();
            let got = Cdf::of_plane(matched.plane(ch), 256).unwrap();
            for (r, g) in reference[ch.index()].values().iter().zip(got.values()) {
                assert!(r - g >= 0.0 && r - g < m, "{} {ch}", f[0]);
            }
        }
    }
}

#[test]
fn split_table_shaped_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.csv");
    synthetic_manifest(&GRAPEVINE_STRATUM_COUNTS)
        .write_csv(fs::File::create(&manifest).unwrap())
        .unwrap();
    let run = |name: &str| {
        let out_path = dir.path().join(name);
        let out = common::histmatch(&[
            "split",
            manifest.to_str().unwrap(),
            "--k",
            "5",
            "--out",
            out_path.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        fs::read_to_string(out_path).unwrap()
    };
    let a = run("a.csv");
    assert_eq!(a, run("b.csv"));
    let folds: Vec<usize> = a
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(folds.len(), 1469);
    for k in 0..5 {
        assert!(folds.contains(&k));
    }
    assert!(folds.iter().all(|&f| f < 5));
}

#[test]
fn split_k_zero_is_usage_error() {
    let c = Corpus::new(3, 11);
    let out = common::histmatch(&[
        "split",
        &c.manifest(),
        "--k",
        "0",
        "--out",
        &c.path("f.csv"),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

fn write_predictions(dir: &Path, name: &str, rows: &[(&str, &str, &str)]) -> String {
    let mut text = String::from("path,true_label,pred_label\n");
    for (p, t, q) in rows {
        text.push_str(&format!("{p},{t},{q}\n"));
    }
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn fixture_rows() -> Vec<(String, &'static str, &'static str)> {
    let mut rows = Vec::new();
    let mut push = |t: &'static str, p: &'static str, n: usize| {
        for _ in 0..n {
            rows.push((format!("img{:03}.png", rows.len()), t, p));
        }
    };
    push("healthy", "healthy", 8);
    push("healthy", "downy_mildew", 2);
    push("downy_mildew", "healthy", 1);
    push("downy_mildew", "downy_mildew", 9);
    push("spider_mite", "spider_mite", 10);
    rows
}

#[test]
fn score_fixture_and_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let rows = fixture_rows();
    let borrowed: Vec<(&str, &str, &str)> =
        rows.iter().map(|(p, t, q)| (p.as_str(), *t, *q)).collect();
    let fixture = write_predictions(dir.path(), "f.csv", &borrowed);
    let out = common::histmatch(&["score", &fixture]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("0.9000"), "{}", stdout(&out));

    let perfect: Vec<(&str, &str, &str)> =
        rows.iter().map(|(p, t, _)| (p.as_str(), *t, *t)).collect();
    let perfect = write_predictions(dir.path(), "p.csv", &perfect);
    let out = common::histmatch(&["score", &perfect, "--format", "json"]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["balanced_accuracy"], 1.0);

    let out = common::histmatch(&["score", &fixture, &perfect]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("±"), "{}", stdout(&out));
}

#[test]
fn score_unknown_label_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let preds = write_predictions(
        dir.path(),
        "x.csv",
        &[("a.png", "healthy", "powdery_mildew")],
    );
    assert_eq!(common::histmatch(&["score", &preds]).status.code(), Some(3));
}

#[test]
fn score_by_image_type() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = String::from("path,label,image_type\n");
    let mut rows = Vec::new();
    for (i, label) in ["healthy", "downy_mildew", "spider_mite"]
        .iter()
        .cycle()
        .take(12)
        .enumerate()
    {
        let image_type = if i < 6 { "canopy" } else { "leaf_focused" };
        let path = format!("i{i}.png");
        manifest.push_str(&format!("{path},{label},{image_type}\n"));
        // Canopy images get one mistake; leaf-focused are all correct.
        let pred = if i == 0 { "spider_mite" } else { label };
        rows.push((path, *label, pred));
    }
    let mpath = dir.path().join("m.csv");
    fs::write(&mpath, manifest).unwrap();
    let borrowed: Vec<(&str, &str, &str)> =
        rows.iter().map(|(p, t, q)| (p.as_str(), *t, *q)).collect();
    let preds = write_predictions(dir.path(), "p.csv", &borrowed);
    let out = common::histmatch(&[
        "score",
        &preds,
        "--by",
        "image_type",
        "--manifest",
        mpath.to_str().unwrap(),
        "--format",
        "json",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["leaf_focused"]["balanced_accuracy"], 1.0);
    assert!((v["canopy"]["balanced_accuracy"].as_f64().unwrap() - 5.0 / 6.0).abs() < 1e-12);
}

#[test]
fn inspect_profile_and_image() {
    let c = Corpus::new(6, 12);
    let profile = c.build_ref();
    for ch in ["r", "g", "b"] {
        let out = common::histmatch(&["inspect", &profile, "--channel", ch]);
        assert_eq!(out.status.code(), Some(0));
        let text = stdout(&out);
        assert_eq!(text.lines().count(), 257);
        assert_eq!(text.lines().next(), Some("bin,value"));
    }

    let first = fs::read_to_string(&c.manifest)
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .to_string();
    let image = c.root.join("data").join(first.split(',').next().unwrap());
    let csv_path = c.path("g.csv");
    let out = common::histmatch(&[
        "inspect",
        image.to_str().unwrap(),
        "--channel",
        "g",
        "--out",
        &csv_path,
    ]);
    assert_eq!(out.status.code(), Some(0));
    let img = load_image(&image).unwrap();
    let n = img.plane(Channel::G).len() as f64;
    let dumped: Vec<f64> = fs::read_to_string(&csv_path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    for (level, p) in dumped.iter().enumerate() {
        let hits = img
            .plane(Channel::G)
            .iter()
            .filter(|&&v| v as usize == level)
            .count();
        assert_eq!(*p, hits as f64 / n);
    }

    let out = common::histmatch(&["inspect", image.to_str().unwrap(), "--cdf"]);
    let last = stdout(&out).lines().last().unwrap().to_string();
    assert_eq!(last, "255,1");
}

#[test]
fn inspect_missing_path_exits_2() {
    assert_eq!(
        common::histmatch(&["inspect", "/nonexistent/x.png"])
            .status
            .code(),
        Some(2)
    );
}
