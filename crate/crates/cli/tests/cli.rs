mod common;

use std::process::Command;

use common::{files_in, Fixture};
use simi_sfx_core::audio_io::load_clip;
use simi_sfx_core::nn::load_checkpoint;
use simi_sfx_core::toy::{TOY_CLIP_LEN, TOY_SAMPLE_RATE};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_simi-sfx"))
}

fn error_line(stderr: &[u8]) -> serde_json::Value {
    let text = String::from_utf8_lossy(stderr);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {text:?}");
    serde_json::from_str(lines[0]).unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = bin().args(["train", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out.stderr)["error"]["kind"], "usage");
}

#[test]
fn missing_subcommand_is_a_usage_error() {
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    error_line(&out.stderr);
}

#[test]
fn help_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("synth"));
}

#[test]
fn missing_manifest_is_a_runtime_error() {
    let fx = Fixture::new();
    let out = bin()
        .args(["--config", &fx.p("config.toml"), "stats", "--manifest"])
        .arg(fx.path("nope.jsonl"))
        .arg("--out")
        .arg(fx.path("s.txt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out.stderr)["error"]["kind"], "io");
    assert!(!fx.path("s.txt").exists());
}

#[test]
fn config_path_falls_back_to_the_environment() {
    let fx = Fixture::new();
    let out = bin()
        .env("SIMI_SFX_CONFIG", fx.path("config.toml"))
        .args(["stats", "--manifest"])
        .arg(fx.path("manifest.jsonl"))
        .arg("--out")
        .arg(fx.path("s.txt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    // The toy embedder has 4 dimensions; the default has more.
    assert_eq!(summary["dim"], 4);
}

#[test]
fn bad_config_is_reported() {
    let fx = Fixture::new();
    std::fs::write(fx.path("bad.toml"), "[train]\nno_such_field = 1\n").unwrap();
    let out = bin()
        .args(["--config", &fx.p("bad.toml"), "stats", "--manifest", &fx.p("manifest.jsonl"), "--out", "x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out.stderr)["error"]["kind"], "config");
}

#[test]
fn dry_run_touches_no_files() {
    let fx = Fixture::new().trained();
    let before = files_in(fx.dir.path());
    let (m, s, c) = (fx.p("manifest.jsonl"), fx.p("stats.txt"), fx.p("model.ckpt"));
    let r = fx.reference();
    let runs: Vec<Vec<&str>> = vec![
        vec!["features", "--manifest", &m, "--out", "feat_dir"],
        vec!["embed", "--manifest", &m, "--out", "e.txt"],
        vec!["stats", "--manifest", &m, "--out", "s2.txt"],
        vec!["train", "--manifest", &m, "--stats", &s, "--out", "c2.ckpt"],
        vec!["finetune", "--checkpoint", &c, "--manifest", &m, "--stats", &s, "--out", "c3.ckpt"],
        vec!["synth", "--checkpoint", &c, "--manifest", &m, "--reference", &r, "--similarity", "0.5,1", "--out", "o.wav"],
        vec!["sweep", "--checkpoint", &c, "--manifest", &m, "--reference", &r, "--channel", "0", "--steps", "5", "--out", "sw.tsv"],
        vec!["evaluate", "--checkpoint", &c, "--manifest", &m, "--stats", &s, "--out", "ev.tsv"],
        vec!["kde", "--manifest", &m, "--stats", &s, "--out", "k.tsv"],
    ];
    for args in runs {
        let mut full = vec!["--dry-run"];
        full.extend(args.iter());
        assert_eq!(fx.run(&full), 0, "{args:?}");
    }
    assert_eq!(files_in(fx.dir.path()), before);
}

#[test]
fn train_is_deterministic_and_resumable() {
    let fx = Fixture::new().trained();
    let (m, s) = (fx.p("manifest.jsonl"), fx.p("stats.txt"));
    assert_eq!(fx.run(&["train", "--manifest", &m, "--stats", &s, "--out", &fx.p("again.ckpt")]), 0);
    let a = load_checkpoint(&fx.path("model.ckpt")).unwrap();
    let b = load_checkpoint(&fx.path("again.ckpt")).unwrap();
    assert_eq!(a.content_hash(), b.content_hash());
    assert_eq!(a.meta.epoch, 2);
    assert_eq!(a.meta.class_labels, vec!["noise_burst", "click_train"]);

    assert_eq!(fx.run(&["--seed", "9", "train", "--manifest", &m, "--stats", &s, "--out", &fx.p("seeded.ckpt")]), 0);
    let c = load_checkpoint(&fx.path("seeded.ckpt")).unwrap();
    assert_ne!(a.content_hash(), c.content_hash());

    let h = fx.p("history.tsv");
    let resume = fx.p("model.ckpt");
    let args = ["train", "--manifest", &m, "--stats", &s, "--out", &fx.p("more.ckpt"), "--resume", &resume, "--history", &h];
    assert_eq!(fx.run(&args), 0);
    assert_eq!(load_checkpoint(&fx.path("more.ckpt")).unwrap().meta.epoch, 4);
    assert!(std::fs::read_to_string(fx.path("history.tsv")).unwrap().lines().count() >= 4);
}

#[test]
fn train_rejects_statistics_for_other_classes() {
    let fx = Fixture::new();
    let (m, s) = (fx.p("manifest.jsonl"), fx.p("stats.txt"));
    assert_eq!(fx.run(&["stats", "--manifest", &m, "--out", &s]), 0);
    let text = std::fs::read_to_string(fx.path("manifest.jsonl")).unwrap();
    let one_class: String = text.lines().filter(|l| l.contains("noise_burst")).map(|l| format!("{l}\n")).collect();
    std::fs::write(fx.path("one.jsonl"), one_class).unwrap();
    assert_eq!(fx.run(&["train", "--manifest", &fx.p("one.jsonl"), "--stats", &s, "--out", &fx.p("x.ckpt")]), 1);
    assert!(!fx.path("x.ckpt").exists());
}

#[test]
fn synth_writes_one_clip_of_the_reference_length() {
    let fx = Fixture::new().trained();
    let (m, c, r) = (fx.p("manifest.jsonl"), fx.p("model.ckpt"), fx.reference());
    let out = fx.p("render.wav");
    let args = ["synth", "--checkpoint", &c, "--manifest", &m, "--reference", &r, "--similarity", "0.5,1.0", "--out", &out];
    assert_eq!(fx.run(&args), 0);
    let clip = load_clip(&fx.path("render.wav"), TOY_SAMPLE_RATE, TOY_CLIP_LEN as f64 / TOY_SAMPLE_RATE as f64).unwrap();
    assert_eq!(clip.len(), TOY_CLIP_LEN);
    assert!(clip.samples().iter().all(|v| v.is_finite() && v.abs() < 1.0));

    // A WAV path works as a reference too, and the render is deterministic.
    let path_ref = fx.p(&r);
    let out2 = fx.p("render2.wav");
    let args = ["synth", "--checkpoint", &c, "--reference", &path_ref, "--similarity", "0.5,1.0", "--out", &out2];
    assert_eq!(fx.run(&args), 0);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&out2).unwrap());
}

#[test]
fn synth_validates_the_similarity_vector() {
    let fx = Fixture::new().trained();
    let (m, c, r) = (fx.p("manifest.jsonl"), fx.p("model.ckpt"), fx.reference());
    let out = fx.p("bad.wav");
    for sim in ["0.5", "0.5,1.0,1.0", "1.2,0.0", "-0.1,0.0"] {
        let args = ["synth", "--checkpoint", &c, "--manifest", &m, "--reference", &r, "--similarity", sim, "--out", &out];
        assert_eq!(fx.run(&args), 1, "{sim}");
    }
    let args = ["synth", "--checkpoint", &c, "--manifest", &m, "--reference", &r, "--similarity", "a,b", "--out", &out];
    assert_eq!(fx.run(&args), 2);
    assert!(!fx.path("bad.wav").exists());
}

#[test]
fn finetune_sweep_evaluate_and_kde() {
    let fx = Fixture::new().trained();
    let (m, s, c, r) = (fx.p("manifest.jsonl"), fx.p("stats.txt"), fx.p("model.ckpt"), fx.reference());
    let ft = fx.p("ft.ckpt");
    assert_eq!(fx.run(&["finetune", "--checkpoint", &c, "--manifest", &m, "--stats", &s, "--out", &ft]), 0);
    let tuned = load_checkpoint(&fx.path("ft.ckpt")).unwrap();
    assert_eq!(tuned.meta.finetune_epochs, 2);
    assert_eq!(tuned.meta.epoch, 2);

    let sw = fx.p("sweep.tsv");
    let args = ["sweep", "--checkpoint", &ft, "--manifest", &m, "--reference", &r, "--channel", "0", "--steps", "7", "--out", &sw];
    assert_eq!(fx.run(&args), 0);
    let table = std::fs::read_to_string(&sw).unwrap();
    assert!(!table.is_empty());

    let ev = fx.p("eval.tsv");
    assert_eq!(fx.run(&["evaluate", "--checkpoint", &c, "--manifest", &m, "--stats", &s, "--out", &ev]), 0);
    let table = std::fs::read_to_string(&ev).unwrap();
    assert!(table.starts_with("class\tclips\tlsd_mean"));
    assert!(table.lines().any(|l| l.starts_with("overall\t")));

    let k = fx.p("kde.tsv");
    assert_eq!(fx.run(&["kde", "--manifest", &m, "--stats", &s, "--out", &k]), 0);
    assert!(!std::fs::read_to_string(&k).unwrap().is_empty());
}

#[test]
fn sweep_rejects_bad_channel_and_untrained_models() {
    let fx = Fixture::new().trained();
    let (m, c, r) = (fx.p("manifest.jsonl"), fx.p("model.ckpt"), fx.reference());
    let args = ["sweep", "--checkpoint", &c, "--manifest", &m, "--reference", &r, "--channel", "5"];
    assert_eq!(fx.run(&args), 2);

    let untrained = fx.p("untrained.ckpt");
    let ckpt = load_checkpoint(&fx.path("model.ckpt")).unwrap();
    let fresh = simi_sfx_core::nn::Checkpoint::init(
        ckpt.weights.config,
        ckpt.meta.data.clone(),
        ckpt.meta.class_labels.clone(),
        ckpt.meta.stats_hash.clone(),
    )
    .unwrap();
    simi_sfx_core::nn::save_checkpoint(&fresh, &fx.path("untrained.ckpt")).unwrap();
    let args = ["sweep", "--checkpoint", &untrained, "--manifest", &m, "--reference", &r, "--channel", "0"];
    assert_eq!(fx.run(&args), 1);
}

#[test]
fn features_and_embeddings_round_trip() {
    let fx = Fixture::new();
    let m = fx.p("manifest.jsonl");
    let feat = fx.p("feat");
    assert_eq!(fx.run(&["features", "--manifest", &m, "--out", &feat, "--split", "test"]), 0);
    let written = files_in(&fx.path("feat"));
    // Two test clips, each with a feature track and a peak waveform.
    assert_eq!(written.len(), 4);

    let e = fx.p("emb.txt");
    assert_eq!(fx.run(&["embed", "--manifest", &m, "--out", &e]), 0);
    let e2 = fx.p("emb2.txt");
    assert_eq!(fx.run(&["embed", "--manifest", &m, "--out", &e2, "--external", &e]), 0);

    let s = fx.p("ext_stats.txt");
    assert_eq!(fx.run(&["stats", "--manifest", &m, "--out", &s, "--embeddings", &e]), 0);
    let c = fx.p("ext.ckpt");
    assert_eq!(fx.run(&["train", "--manifest", &m, "--stats", &s, "--embeddings", &e, "--out", &c]), 0);
    // External statistics need the embeddings for every clip.
    assert_eq!(fx.run(&["train", "--manifest", &m, "--stats", &s, "--out", &fx.p("no.ckpt")]), 1);
    assert_eq!(fx.run(&["kde", "--manifest", &m, "--stats", &s, "--embeddings", &e]), 0);
}
