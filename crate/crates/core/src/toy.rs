//! Small synthetic two-class corpus (band-limited noise bursts and click
//! trains) with a matching desk-scale configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio_io::AudioClip;
use crate::config::{DataConfig, FinetuneConfig, ProjectConfig, TrainConfig};
use crate::nn::DecoderConfig;
use crate::similarity::EmbedderConfig;

pub const TOY_SAMPLE_RATE: u32 = 16_000;
pub const TOY_CLIP_LEN: usize = 8192;
pub const TOY_LABELS: [&str; 2] = ["noise_burst", "click_train"];
/// Background noise level (about -60 dBFS) so no clip is digitally silent.
pub const TOY_NOISE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyClass {
    NoiseBurst,
    ClickTrain,
}

impl ToyClass {
    pub fn label(self) -> &'static str {
        match self {
            ToyClass::NoiseBurst => TOY_LABELS[0],
            ToyClass::ClickTrain => TOY_LABELS[1],
        }
    }
}

fn band_limited_noise(rng: &mut ChaCha8Rng, len: usize, lo_hz: f64, hi_hz: f64) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..len)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(len).process(&mut buf);
    let hz = TOY_SAMPLE_RATE as f64 / len as f64;
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(len - k) as f64 * hz;
        if f < lo_hz || f > hi_hz {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let y: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    y.iter().map(|v| v / peak).collect()
}

/// One clip of `class`; the same seed gives the same clip.
pub fn toy_clip(class: ToyClass, seed: u64, id: impl Into<String>) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = TOY_CLIP_LEN;
    let samples = match class {
        ToyClass::NoiseBurst => {
            let lo = rng.gen_range(1200.0..2200.0);
            let width = rng.gen_range(1000.0..1800.0);
            let noise = band_limited_noise(&mut rng, n, lo, lo + width);
            let bursts = rng.gen_range(2..4);
            let mut env = vec![0.0; n];
            for _ in 0..bursts {
                let start = rng.gen_range(0..n - 2048);
                let attack = rng.gen_range(100..400);
                let decay = rng.gen_range(800.0..1600.0);
                let gain = rng.gen_range(0.4..0.8);
                for (t, e) in env.iter_mut().enumerate().skip(start) {
                    let k = t - start;
                    let a = if k < attack {
                        k as f64 / attack as f64
                    } else {
                        (-((k - attack) as f64) / decay).exp()
                    };
                    *e += gain * a;
                }
            }
            noise.iter().zip(&env).map(|(x, e)| x * e.min(1.0)).collect()
        }
        ToyClass::ClickTrain => {
            let period = rng.gen_range(700..1400);
            let tone = rng.gen_range(3000.0..5000.0);
            let decay = rng.gen_range(15.0..40.0);
            let mut y = vec![0.0; n];
            let mut start = rng.gen_range(0..period);
            while start < n {
                let gain = rng.gen_range(0.5..0.9);
                for (k, v) in y.iter_mut().skip(start).take(400).enumerate() {
                    let t = k as f64;
                    *v += gain
                        * (-t / decay).exp()
                        * (2.0 * std::f64::consts::PI * tone * t / TOY_SAMPLE_RATE as f64).cos();
                }
                start += period;
            }
            y
        }
    };
    let samples: Vec<f64> = samples
        .into_iter()
        .map(|v| {
            let n: f64 = StandardNormal.sample(&mut rng);
            v + TOY_NOISE_FLOOR * n
        })
        .collect();
    AudioClip::new(samples, TOY_SAMPLE_RATE, id).expect("finite toy samples")
}

/// `per_class` clips of each class, ids `<label>_<seed_offset>_<i>`.
pub fn toy_clips(per_class: usize, seed: u64) -> Vec<(AudioClip, String)> {
    let mut out = Vec::new();
    for (c, class) in [ToyClass::NoiseBurst, ToyClass::ClickTrain].into_iter().enumerate() {
        for i in 0..per_class {
            let s = seed
                .wrapping_mul(1_000_003)
                .wrapping_add((c * 10_000 + i) as u64);
            out.push((toy_clip(class, s, format!("{}_{seed}_{i}", class.label())), class.label().to_string()));
        }
    }
    out
}

/// Toy corpus split into training, test and judge-fitting clips.
pub struct ToyCorpus {
    pub train: Vec<(AudioClip, String)>,
    pub test: Vec<(AudioClip, String)>,
    /// Held-out clips for fitting the judge statistics only.
    pub judge: Vec<(AudioClip, String)>,
}

/// 16 clips (6 train + 2 test per class) plus 8 judge clips per class.
pub fn toy_corpus(seed: u64) -> ToyCorpus {
    let main = toy_clips(8, seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, item) in main.into_iter().enumerate() {
        if i % 8 < 6 {
            train.push(item);
        } else {
            test.push(item);
        }
    }
    ToyCorpus {
        train,
        test,
        judge: toy_clips(8, seed.wrapping_add(7919)),
    }
}

/// Desk-scale configuration for the toy corpus.
pub fn toy_config() -> ProjectConfig {
    let embedder = EmbedderConfig {
        dim: 4,
        seed: 0x5eed_0001,
        fft_size: 512,
        hop: 256,
        bands: 16,
        sample_rate: TOY_SAMPLE_RATE,
    };
    ProjectConfig {
        data: DataConfig {
            sample_rate: TOY_SAMPLE_RATE,
            clip_seconds: TOY_CLIP_LEN as f64 / TOY_SAMPLE_RATE as f64,
            embedder,
            judge: EmbedderConfig {
                dim: 3,
                seed: 0x5eed_0002,
                hop: 128,
                bands: 12,
                ..embedder
            },
            ..DataConfig::default()
        },
        model: DecoderConfig {
            hidden: 32,
            cond_hidden: 16,
            reverb_len: 1024,
            ..DecoderConfig::default()
        },
        train: TrainConfig {
            epochs: 500,
            batch_size: 4,
            lr: 1e-3,
            lr_final: 1e-4,
            ..TrainConfig::default()
        },
        finetune: FinetuneConfig {
            epochs: 100,
            batch_size: 4,
            lr: 1e-3,
            ..FinetuneConfig::default()
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clips_are_deterministic_and_bounded() {
        let a = toy_clips(3, 1);
        let b = toy_clips(3, 1);
        assert_eq!(a.len(), 6);
        for ((x, lx), (y, ly)) in a.iter().zip(&b) {
            assert_eq!(x.samples(), y.samples());
            assert_eq!(lx, ly);
            assert_eq!(x.len(), TOY_CLIP_LEN);
            assert!(x.samples().iter().all(|v| v.abs() <= 2.0));
            assert!(x.samples().iter().any(|v| v.abs() > 0.1));
        }
        assert_ne!(a[0].0.samples(), a[1].0.samples());
    }

    #[test]
    fn corpus_split_sizes() {
        let c = toy_corpus(0);
        assert_eq!(c.train.len(), 12);
        assert_eq!(c.test.len(), 4);
        assert_eq!(c.judge.len(), 16);
        toy_config().validate().unwrap();
        assert_eq!(toy_config().data.clip_len(), TOY_CLIP_LEN);
    }
}
