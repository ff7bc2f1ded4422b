mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::*;
use in2::config::Config;
use in2::image::{load_image, save_mask};
use in2::training::{load_generator, CropKind};

fn in2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_in2"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = in2(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Config with the small model and one short epoch.
fn desk_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = Config::default();
    cfg.model = desk_generator_config();
    cfg.disc = desk_disc();
    cfg.train.epochs = 1;
    cfg.train.warmup_epochs = 0.0;
    cfg.train.batch_size = 2;
    cfg.train.crop = CropKind::None;
    let path = dir.join("desk.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

#[test]
fn make_masks_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["make-masks", "--out", p(out), "--count", "3", "--height", "32", "--width", "40", "--seed", "5"]);
    }
    let tsv = std::fs::read_to_string(a.join("masks.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 4);
    for i in 0..3 {
        let name = format!("mask_{i:05}.png");
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
        let ratio: f64 = tsv.lines().nth(i + 1).unwrap().split('\t').nth(4).unwrap().parse().unwrap();
        assert!((0.2..=0.3).contains(&ratio));
    }
}

#[test]
fn make_splits_reports_rejects() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    write_corpus(&src, 2, 48, 64, 1);
    in2::image::save_image(&synthetic_image(20, 20, 3), src.join("small.png")).unwrap();
    let out = dir.path().join("splits");
    let text = ok(&[
        "make-splits", "--src", p(&src), "--out", p(&out), "--name", "wide", "--size", "32x40", "--materialize",
    ]);
    assert!(text.contains("2 images, 1 skipped"), "{text}");
    let m = in2::dataset::SampleManifest::load(out.join("wide.manifest")).unwrap();
    assert_eq!(m.entries.len(), 2);
    assert_eq!(m.load_image(0).unwrap().dims(), (32, 40));
}

#[test]
fn train_infer_eval_bench_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(dir.path());
    let manifest = write_corpus(&dir.path().join("data"), 4, 24, 24, 2);
    let mpath = dir.path().join("train.manifest");
    manifest.save(&mpath).unwrap();
    let run = dir.path().join("run");

    ok(&["--config", p(&cfg), "train", "--manifest", p(&mpath), "--out", p(&run), "--train.epochs", "1"]);
    let resolved = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(resolved.contains("epochs = 1"));
    let gen = load_generator(run.join("generator.ckpt")).unwrap();
    assert_eq!(gen.config, desk_generator_config());
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 2);

    let img = dir.path().join("data/img00.png");
    let mask = dir.path().join("mask.png");
    save_mask(&probe_masks(1, 24, 24)[0], &mask).unwrap();
    let ckpt = run.join("generator.ckpt");
    for adapter in ["direct", "resize", "pad_edge"] {
        let out = dir.path().join(format!("out_{adapter}.png"));
        ok(&[
            "--config", p(&cfg), "infer", "--checkpoint", p(&ckpt), "--image", p(&img), "--mask", p(&mask), "--out",
            p(&out), "--adapter", adapter, "--train-size", "16",
        ]);
        assert_eq!(load_image(&out).unwrap().dims(), (24, 24));
    }

    let split = format!("toy={}", p(&mpath));
    let table = ok(&[
        "--config", p(&cfg), "eval", "--checkpoint", p(&ckpt), "--split", &split, "--adapter", "direct", "--adapter",
        "resize", "--eval.train_size", "16",
    ]);
    assert!(table.contains("toy/direct") && table.contains("toy/resize"), "{table}");

    let bench = ok(&["--config", p(&cfg), "bench", "--sizes", "16x16,16x24", "--repeats", "1"]);
    assert_eq!(bench.lines().count(), 3, "{bench}");
}

#[test]
fn resume_continues_from_a_state_archive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(dir.path());
    let manifest = write_corpus(&dir.path().join("data"), 4, 24, 24, 2);
    let mpath = dir.path().join("train.manifest");
    manifest.save(&mpath).unwrap();
    let first = dir.path().join("first");
    ok(&["--config", p(&cfg), "train", "--manifest", p(&mpath), "--out", p(&first)]);
    let second = dir.path().join("second");
    let state = first.join("final.ckpt");
    let text = ok(&[
        "--config", p(&cfg), "train", "--manifest", p(&mpath), "--out", p(&second), "--resume", p(&state),
        "--train.epochs", "2", "--train.warmup_epochs", "0",
    ]);
    assert!(text.contains("trained 4 steps"), "{text}");

    // A resume against a different architecture is refused.
    let out = in2(&[
        "--config", p(&cfg), "train", "--manifest", p(&mpath), "--out", p(&second), "--resume", p(&state),
        "--model.pyramid_layers", "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("incompatible"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(in2(&["--help"]).status.code(), Some(0));
    assert_eq!(in2(&["frobnicate"]).status.code(), Some(1));

    let typo = in2(&["bench", "--model.pyrmid_layers", "2"]);
    assert_eq!(typo.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&typo.stderr).contains("did you mean `pyramid_layers`"));

    let missing = in2(&["eval", "--split", &format!("x={}", p(&dir.path().join("none.manifest")))]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("none.manifest"));

    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "[train]\nepochs = \"ten\"\n").unwrap();
    assert_eq!(in2(&["--config", p(&bad_cfg), "bench"]).status.code(), Some(1));
    assert_eq!(in2(&["--config", p(&dir.path().join("absent.toml")), "bench"]).status.code(), Some(2));
}
