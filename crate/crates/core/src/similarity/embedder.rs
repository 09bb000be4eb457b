use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Embedding, EmbeddingSource};
use crate::audio_io::AudioClip;
use crate::autodiff::{StftMagConfig, Tape, Var};
use crate::dsp::Window;
use crate::error::{Error, Result};

const LOG_EPS: f64 = 1e-12;
const SPREAD_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub dim: usize,
    pub seed: u64,
    pub fft_size: usize,
    pub hop: usize,
    pub bands: usize,
    pub sample_rate: u32,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            seed: 0x5eed_0001,
            fft_size: 1024,
            hop: 512,
            bands: 64,
            sample_rate: 44_100,
        }
    }
}

impl EmbedderConfig {
    /// Width of the pre-projection feature vector.
    pub fn feature_len(&self) -> usize {
        self.bands + 3
    }
}

/// Fixed spectral-statistics embedder, differentiable end to end.
///
/// Pre-projection features, in order:
/// - `ln(T)`, the log of total band energy of the mean power spectrum;
/// - `ln(E_j) - ln(T)` for each mel-style band `j` (band ratios);
/// - temporal centroid and temporal spread of the frame energy envelope,
///   on a `[0, 1]` time axis.
///
/// The features are mapped to `dim` values by a seeded Gaussian matrix
/// scaled by `1 / sqrt(feature_len)`.
#[derive(Debug, Clone)]
pub struct BuiltinEmbedder {
    config: EmbedderConfig,
    /// `[bins, bands]`
    filters: Vec<f64>,
    /// `[feature_len, dim]`
    projection: Vec<f64>,
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with edges equally spaced on the mel scale between
/// 0 Hz and Nyquist. A triangle too narrow to cover any bin collapses onto
/// the bin nearest its center.
pub fn mel_filter_matrix(fft_size: usize, sample_rate: u32, bands: usize) -> Vec<f64> {
    let bins = fft_size / 2 + 1;
    let nyq = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyq);
    let edges: Vec<f64> = (0..bands + 2)
        .map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / fft_size as f64;
    let mut w = vec![0.0; bins * bands];
    for j in 0..bands {
        let (lo, mid, hi) = (edges[j], edges[j + 1], edges[j + 2]);
        let mut any = false;
        for b in 0..bins {
            let f = b as f64 * bin_hz;
            let v = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            if v > 0.0 {
                w[b * bands + j] = v;
                any = true;
            }
        }
        if !any {
            let b = ((mid / bin_hz).round() as usize).min(bins - 1);
            w[b * bands + j] = 1.0;
        }
    }
    w
}

impl BuiltinEmbedder {
    pub fn new(config: EmbedderConfig) -> Result<Self> {
        if config.dim == 0 || config.bands == 0 {
            return Err(Error::Contract("embedder dim and bands must be positive".into()));
        }
        if !config.fft_size.is_power_of_two() || config.hop == 0 || config.hop > config.fft_size {
            return Err(Error::Contract(format!(
                "embedder framing fft={} hop={} is invalid",
                config.fft_size, config.hop
            )));
        }
        let filters = mel_filter_matrix(config.fft_size, config.sample_rate, config.bands);
        let f = config.feature_len();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let scale = 1.0 / (f as f64).sqrt();
        let projection = (0..f * config.dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Ok(Self {
            config,
            filters,
            projection,
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    fn check_rate(&self, clip: &AudioClip) -> Result<()> {
        if clip.sample_rate() != self.config.sample_rate {
            return Err(Error::Rate {
                found: clip.sample_rate(),
                expected: self.config.sample_rate,
            });
        }
        if clip.is_empty() {
            return Err(Error::Contract("cannot embed an empty clip".into()));
        }
        Ok(())
    }

    /// Pre-projection features of a signal on the tape.
    pub fn features_var<'t>(&self, x: Var<'t>) -> Var<'t> {
        let tape = x.tape();
        let c = &self.config;
        let bins = c.fft_size / 2 + 1;
        let power = x
            .stft_mag(StftMagConfig {
                fft_size: c.fft_size,
                hop: c.hop,
                window: Window::Hann,
            })
            .square();
        let frames = power.shape()[0];

        let mean_power = power.mean_rows().reshape(&[1, bins]);
        let w = tape.constant_vec(&[bins, c.bands], self.filters.clone());
        let band_energy = mean_power.matmul(w);
        let total = band_energy.sum().add_scalar(LOG_EPS).ln();
        let total_row = total
            .reshape(&[1, 1])
            .matmul(tape.constant_vec(&[1, c.bands], vec![1.0; c.bands]));
        let ratios = band_energy.add_scalar(LOG_EPS).ln().sub(total_row).reshape(&[c.bands]);

        let envelope = power.sum_cols();
        let norm = tape.scalar_constant(1.0).div(envelope.sum().add_scalar(LOG_EPS));
        let p = envelope.mul_scalar(norm);
        let denom = (frames.max(2) - 1) as f64;
        let axis: Vec<f64> = (0..frames).map(|t| t as f64 / denom).collect();
        let axis_sq: Vec<f64> = axis.iter().map(|v| v * v).collect();
        let centroid = p.mul(tape.constant_vec(&[frames], axis)).sum();
        let second = p.mul(tape.constant_vec(&[frames], axis_sq)).sum();
        let spread = second.sub(centroid.square()).add_scalar(SPREAD_EPS).sqrt();

        Var::concat(&[
            total.reshape(&[1]),
            ratios,
            centroid.reshape(&[1]),
            spread.reshape(&[1]),
        ])
    }

    /// Projected embedding of a signal on the tape, shape `[dim]`.
    pub fn embed_var<'t>(&self, x: Var<'t>) -> Var<'t> {
        let f = self.config.feature_len();
        let p = x
            .tape()
            .constant_vec(&[f, self.config.dim], self.projection.clone());
        self.features_var(x).reshape(&[1, f]).matmul(p).reshape(&[self.config.dim])
    }

    pub fn raw_features(&self, clip: &AudioClip) -> Result<Vec<f64>> {
        self.check_rate(clip)?;
        let tape = Tape::new();
        let x = tape.constant_vec(&[clip.len()], clip.samples().to_vec());
        Ok(self.features_var(x).to_vec())
    }

    pub fn embed_samples(&self, samples: &[f64]) -> Vec<f64> {
        let tape = Tape::new();
        let x = tape.constant_vec(&[samples.len()], samples.to_vec());
        self.embed_var(x).to_vec()
    }

    pub fn embed(&self, clip: &AudioClip) -> Result<Embedding> {
        self.check_rate(clip)?;
        Ok(Embedding {
            vector: self.embed_samples(clip.samples()),
            clip_id: clip.id().to_string(),
            source: EmbeddingSource::Builtin,
        })
    }
}

/// Convenience wrapper: embeds `clip` with a fresh embedder of width `dim`
/// and otherwise default settings at the clip's sample rate.
pub fn embed_builtin(clip: &AudioClip, dim: usize) -> Result<Embedding> {
    let cfg = EmbedderConfig {
        dim,
        sample_rate: clip.sample_rate(),
        ..EmbedderConfig::default()
    };
    BuiltinEmbedder::new(cfg)?.embed(clip)
}
