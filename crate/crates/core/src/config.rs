//! Run configuration shared by the library and the command line.

use serde::{Deserialize, Serialize};

use crate::audio_io::{clip_samples, DEFAULT_CLIP_SECONDS, DEFAULT_SAMPLE_RATE, DEFAULT_TRAIN_RATIO};
use crate::error::{Error, Result};
use crate::nn::DecoderConfig;
use crate::similarity::{EmbedderConfig, DEFAULT_EPSILON_SCALE};

pub const DEFAULT_STFT_SCALES: [usize; 8] = [2048, 1024, 512, 256, 128, 64, 32, 16];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_point: f64,
    pub lr_final: f64,
    pub stft_scales: Vec<usize>,
    pub transient_loss_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5000,
            batch_size: 16,
            lr: 1e-4,
            lr_decay_point: 0.8,
            lr_final: 1e-5,
            stft_scales: DEFAULT_STFT_SCALES.to_vec(),
            transient_loss_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.lr_decay_point > 0.0 && self.lr_decay_point < 1.0) {
            return Err(Error::Config("lr_decay_point must lie in (0, 1)".into()));
        }
        if self.stft_scales.is_empty()
            || self.stft_scales.iter().any(|s| !s.is_power_of_two() || *s < 4)
            || self.stft_scales.windows(2).any(|w| w[0] <= w[1])
        {
            return Err(Error::Config(
                "stft_scales must be strictly decreasing powers of two (>= 4)".into(),
            ));
        }
        if !(self.transient_loss_weight >= 0.0) {
            return Err(Error::Config("transient_loss_weight must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Width of the smooth clamp applied to measured scores.
    pub clamp_width: f64,
    /// Slope kept outside `[0, 1]` so far-off outputs still get gradient.
    pub clamp_leak: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10_000,
            batch_size: 16,
            lr: 1e-4,
            seed: 0,
            clamp_width: 0.02,
            clamp_leak: 0.01,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.clamp_width > 0.0) {
            return Err(Error::Config("lr and clamp_width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.clamp_leak) {
            return Err(Error::Config("clamp_leak must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Dataset, feature and embedding settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub sample_rate: u32,
    pub clip_seconds: f64,
    pub train_ratio: f64,
    pub epsilon_scale: f64,
    /// Embedder behind the conditioning statistics.
    pub embedder: EmbedderConfig,
    /// Independent embedder used to judge controllability.
    pub judge: EmbedderConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            clip_seconds: DEFAULT_CLIP_SECONDS,
            train_ratio: DEFAULT_TRAIN_RATIO,
            epsilon_scale: DEFAULT_EPSILON_SCALE,
            embedder: EmbedderConfig::default(),
            judge: EmbedderConfig {
                dim: 32,
                seed: 0x5eed_0002,
                ..EmbedderConfig::default()
            },
        }
    }
}

impl DataConfig {
    pub fn clip_len(&self) -> usize {
        clip_samples(self.sample_rate, self.clip_seconds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || !(self.clip_seconds > 0.0) {
            return Err(Error::Config("sample_rate and clip_seconds must be positive".into()));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio <= 1.0) {
            return Err(Error::Config("train_ratio must lie in (0, 1]".into()));
        }
        if !(self.epsilon_scale > 0.0) {
            return Err(Error::Config("epsilon_scale must be positive".into()));
        }
        for (name, e) in [("embedder", &self.embedder), ("judge", &self.judge)] {
            if e.sample_rate != self.sample_rate {
                return Err(Error::Config(format!(
                    "{name}.sample_rate {} differs from data sample_rate {}",
                    e.sample_rate, self.sample_rate
                )));
            }
        }
        Ok(())
    }
}

/// Everything a run needs, as read from a config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    pub data: DataConfig,
    pub model: DecoderConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
}

impl ProjectConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.finetune.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let t = TrainConfig::default();
        assert_eq!(t.stft_scales.len(), 8);
        assert_eq!((t.epochs, t.batch_size), (5000, 16));
        t.validate().unwrap();
        assert_eq!(FinetuneConfig::default().epochs, 10_000);
        assert_eq!(DataConfig::default().clip_len(), 176_400);
        ProjectConfig::default().validate().unwrap();
    }

    #[test]
    fn bad_scales() {
        let mut t = TrainConfig::default();
        t.stft_scales = vec![256, 512];
        assert!(t.validate().is_err());
        t.stft_scales = vec![300];
        assert!(t.validate().is_err());
        t.stft_scales = vec![256];
        t.lr_decay_point = 1.0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = ProjectConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        let back: ProjectConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}
