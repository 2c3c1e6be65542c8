use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hacseg_cli::config::{flatten_defaults, RunConfig};
use hacseg_core::raster::{load_image, load_mask, save_image, save_mask};
use hacseg_core::synth::synthetic_tree;
use hacseg_core::{BinaryMask, RasterImage};

fn hacseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hacseg"))
        .args(args)
        .env_remove("BLAVESS_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn t_fixture() -> BinaryMask {
    BinaryMask::from_fn(200, 80, |x, y| {
        let stem = (20..170).contains(&x) && (20..23).contains(&y);
        let twig = (94..97).contains(&x) && (23..53).contains(&y);
        stem || twig
    })
}

#[test]
fn help_enumerates_every_config_key() {
    let o = hacseg(&["--help"]);
    ok(&o);
    let help = String::from_utf8(o.stdout).unwrap();
    let listed: Vec<(String, String)> = help
        .lines()
        .skip_while(|l| !l.starts_with("Configuration keys"))
        .skip(1)
        .take_while(|l| l.starts_with("  "))
        .filter_map(|l| l.trim().split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let schema = flatten_defaults();
    assert_eq!(
        listed.iter().map(|(k, _)| k).collect::<Vec<_>>(),
        schema.iter().map(|(k, _)| k).collect::<Vec<_>>()
    );
    // The listed defaults rebuild the default configuration.
    let mut doc = String::new();
    let mut section = "";
    for (k, v) in &listed {
        let (sec, key) = k.split_once('.').unwrap();
        if sec != section {
            doc.push_str(&format!("[{sec}]\n"));
            section = sec;
        }
        doc.push_str(&format!("{key} = {v}\n"));
    }
    assert_eq!(RunConfig::parse(&doc).unwrap(), RunConfig::default());
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nwidth = 3\n").unwrap();
    let o = hacseg(&["--config", s(&cfg), "profile", "--in", "x.csv"]);
    assert_eq!(o.status.code(), Some(2));
    let line = String::from_utf8(o.stderr).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(v["error"], "config");
}

#[test]
fn missing_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = hacseg(&["--out", s(dir.path()), "targets", "--in", "/nonexistent/mask.png"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(String::from_utf8(o.stderr).unwrap().lines().count(), 1);
}

#[test]
fn train_hac_without_attention_checkpoint_exits_2() {
    let o = hacseg(&["train-hac", "--synthetic", "2"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("missing attention checkpoint"), "{err}");
}

#[test]
fn profile_identical_frames_have_zero_spread() {
    let dir = tempfile::tempdir().unwrap();
    let sample = synthetic_tree(48, 5);
    save_image(&sample.image, dir.path().join("a.png")).unwrap();
    save_image(&sample.image, dir.path().join("b.png")).unwrap();
    save_mask(&sample.mask, dir.path().join("a_gt.png")).unwrap();
    save_mask(&sample.mask, dir.path().join("b_gt.png")).unwrap();
    std::fs::write(dir.path().join("frames.csv"), "a.png,a_gt.png\nb.png,b_gt.png\n").unwrap();
    let out = dir.path().join("report");
    ok(&hacseg(&["--out", s(&out), "profile", "--in", s(&dir.path().join("frames.csv"))]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("profile.json")).unwrap()).unwrap();
    let agg = report["aggregate"].as_object().unwrap();
    assert!(agg.contains_key("rcc") && agg.contains_key("cv"));
    for (k, a) in agg {
        assert_eq!(a["count"], 2, "{k}");
        assert_eq!(a["std"].as_f64().unwrap(), 0.0, "{k}");
    }
    let table = std::fs::read_to_string(out.join("profile_table.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn targets_on_t_fixture_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("tee.png");
    save_mask(&t_fixture(), &input).unwrap();
    ok(&hacseg(&["--out", s(dir.path()), "targets", "--min-path", "100", "--in", s(&input)]));
    let got = load_mask(dir.path().join("tee_mstar.png")).unwrap();
    let golden = load_mask(fixtures().join("tee_mstar.png")).unwrap();
    assert_eq!(got, golden);
    // The golden file itself: twig gone, stem kept.
    assert!((26..53).all(|y| (94..97).all(|x| !golden.get(x, y))));
    assert!((24..166).all(|x| (20..23).all(|y| golden.get(x, y))));
}

#[test]
fn augment_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let img = synthetic_tree(64, 9).image;
    let input = dir.path().join("frame.png");
    save_image(&img, &input).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&hacseg(&["--out", s(&out), "augment", "--in", s(&input), "--mode", "single"]));
        (
            std::fs::read(out.join("frame_aug.png")).unwrap(),
            std::fs::read(out.join("frame_aug.json")).unwrap(),
        )
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a, b);
    let side: serde_json::Value = serde_json::from_slice(&a.1).unwrap();
    assert_eq!(side["provenance"]["mode"], "single");
    assert_eq!(side["provenance"]["applied"].as_array().unwrap().len(), 1);
    let bad = hacseg(&["--out", s(dir.path()), "augment", "--in", s(&input), "--mode", "both"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn staged_training_inference_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("toy.toml");
    std::fs::write(
        &cfg,
        "[model]\npreset = \"toy\"\ndropout = 0.0\n\
         [pretrain]\nepochs = 1\nwarmup_epochs = 0.5\nlr = 0.002\n\
         [train_attn]\nepochs = 1\nwarmup_epochs = 0.5\nlr = 0.002\nvalidation = 1\nmin_path = 12\n\
         [train_hac]\nepochs = 1\nwarmup_epochs = 0.5\nlr = 0.002\nvalidation = 1\nmin_path = 12\n",
    )
    .unwrap();
    let c = s(&cfg);
    let run_dir = d.join("run");
    let r = s(&run_dir);
    for _ in 0..2 {
        ok(&hacseg(&["--config", c, "--out", r, "pretrain", "--synthetic", "3", "--max-iters", "2"]));
    }
    let first = std::fs::read(run_dir.join("pretrain.hacw")).unwrap();
    ok(&hacseg(&["--config", c, "--out", s(&d.join("again")), "pretrain", "--synthetic", "3", "--max-iters", "2"]));
    assert_eq!(first, std::fs::read(d.join("again/pretrain.hacw")).unwrap());
    assert_eq!(
        std::fs::read(run_dir.join("pretrain_run.json")).unwrap(),
        std::fs::read(d.join("again/pretrain_run.json")).unwrap()
    );

    let pre = run_dir.join("pretrain.hacw");
    ok(&hacseg(&["--config", c, "--out", r, "train-attn", "--synthetic", "3", "--init", s(&pre)]));
    let attn = run_dir.join("attn.hacw");
    ok(&hacseg(&["--config", c, "--out", r, "train-hac", "--synthetic", "3", "--attn-ckpt", s(&attn)]));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("hac_run.json")).unwrap()).unwrap();
    assert_eq!(manifest["run"]["seed"], 42);
    assert_eq!(manifest["run"]["validation_held_out"], 1);
    assert_eq!(manifest["effective_config"]["model"]["preset"], "toy");
    let before = &manifest["run"]["report"]["checksums_before"];
    let after = &manifest["run"]["report"]["checksums_after"];
    assert_eq!(before[0], after[0]);

    let sample = synthetic_tree(64, 77);
    let frame = d.join("frame.png");
    save_image(&sample.image, &frame).unwrap();
    let preds = d.join("pred");
    let hac = run_dir.join("hac.hacw");
    ok(&hacseg(&["--out", s(&preds.join("frame")), "infer", "--ckpt", s(&hac), "--in", s(&frame)]));
    for m in ["pa", "pu", "phac"] {
        assert!(preds.join(format!("frame_{m}.png")).exists(), "{m}");
    }
    ok(&hacseg(&["--out", s(&d.join("ov")), "overlay", "--in", s(&frame), "--prob", s(&preds.join("frame_phac.png"))]));
    let ov: RasterImage = load_image(d.join("ov/frame_overlay.png")).unwrap();
    assert_eq!(ov.dims(), (64, 64));

    let gt = d.join("gt");
    std::fs::create_dir_all(&gt).unwrap();
    save_mask(&sample.mask, gt.join("frame.png")).unwrap();
    let report = d.join("report.json");
    ok(&hacseg(&["--out", s(&report), "eval", "--pred", s(&preds), "--gt", s(&gt)]));
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep["threshold"], 0.5);
    assert_eq!(rep["frames"].as_array().unwrap().len(), 1);
    let acc = rep["frames"][0]["scores"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let wrong = hacseg(&["--out", s(&d.join("x")), "infer", "--ckpt", s(&hac), "--in", s(&d.join("ov/frame_overlay.png"))]);
    assert!(wrong.status.success());
    let small = d.join("small.png");
    save_image(&synthetic_tree(32, 1).image, &small).unwrap();
    let o = hacseg(&["--out", s(&d.join("x")), "infer", "--ckpt", s(&hac), "--in", s(&small)]);
    assert_eq!(o.status.code(), Some(3));
}
