#![allow(dead_code)]

use std::path::{Path, PathBuf};

use simi_sfx::data::config_to_toml;
use simi_sfx_core::audio_io::{write_clip, WavEncoding};
use simi_sfx_core::toy::{toy_clips, toy_config};

/// Tiny dataset, config and (optionally) trained artifacts in a temp dir.
pub struct Fixture {
    pub dir: tempfile::TempDir,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = toy_config();
        cfg.model.hidden = 8;
        cfg.model.cond_hidden = 4;
        cfg.model.noise_bands = 8;
        cfg.model.sinusoids = 4;
        cfg.model.reverb_len = 64;
        cfg.train.epochs = 2;
        cfg.train.batch_size = 2;
        cfg.finetune.epochs = 2;
        cfg.finetune.batch_size = 2;
        std::fs::write(dir.path().join("config.toml"), config_to_toml(&cfg)).unwrap();

        let mut manifest = String::new();
        for (i, (clip, class)) in toy_clips(3, 7).into_iter().enumerate() {
            let name = format!("{class}_{i}.wav");
            write_clip(&clip, &dir.path().join(&name), WavEncoding::Pcm16).unwrap();
            let split = if i % 3 == 2 { "test" } else { "train" };
            manifest.push_str(&format!("{{\"path\":\"{name}\",\"class\":\"{class}\",\"split\":\"{split}\"}}\n"));
        }
        std::fs::write(dir.path().join("manifest.jsonl"), manifest).unwrap();
        Self { dir }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn p(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    /// Some reference clip id from the manifest.
    pub fn reference(&self) -> String {
        let text = std::fs::read_to_string(self.path("manifest.jsonl")).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        v["path"].as_str().unwrap().to_string()
    }

    pub fn run(&self, args: &[&str]) -> i32 {
        let mut argv = vec!["simi-sfx", "--config"];
        let cfg = self.p("config.toml");
        argv.push(&cfg);
        argv.extend_from_slice(args);
        simi_sfx::run_main(argv)
    }

    /// Fits statistics and trains a checkpoint at `model.ckpt`.
    pub fn trained(self) -> Self {
        let (m, s, c) = (self.p("manifest.jsonl"), self.p("stats.txt"), self.p("model.ckpt"));
        assert_eq!(self.run(&["stats", "--manifest", &m, "--out", &s]), 0);
        assert_eq!(self.run(&["train", "--manifest", &m, "--stats", &s, "--out", &c]), 0);
        self
    }
}

pub fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}
