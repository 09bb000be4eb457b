use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{centered_frame_count, reflect_index, Window};
use crate::audio_io::AudioClip;
use crate::error::{Error, Result};

/// Magnitude spectrogram, `frames × bins` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    magnitudes: Vec<f64>,
    frames: usize,
    bins: usize,
    pub fft_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn new(
        magnitudes: Vec<f64>,
        frames: usize,
        fft_size: usize,
        hop: usize,
        sample_rate: u32,
    ) -> Result<Self> {
        let bins = fft_size / 2 + 1;
        if magnitudes.len() != frames * bins {
            return Err(Error::Shape(format!(
                "{} magnitudes for {frames} frames of {bins} bins",
                magnitudes.len()
            )));
        }
        if magnitudes.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::Numeric("magnitudes must be finite and non-negative".into()));
        }
        Ok(Self {
            magnitudes,
            frames,
            bins,
            fft_size,
            hop,
            sample_rate,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn magnitudes(&self) -> &[f64] {
        &self.magnitudes
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.magnitudes[i * self.bins..(i + 1) * self.bins]
    }

    pub fn get(&self, frame: usize, bin: usize) -> f64 {
        self.magnitudes[frame * self.bins + bin]
    }

    /// Same layout with new magnitudes (e.g. after masking).
    pub(crate) fn with_magnitudes(&self, magnitudes: Vec<f64>) -> Self {
        debug_assert_eq!(magnitudes.len(), self.magnitudes.len());
        Self {
            magnitudes,
            ..self.clone()
        }
    }

    /// Frequency of bin `b` in Hz.
    pub fn bin_hz(&self, b: usize) -> f64 {
        b as f64 * self.sample_rate as f64 / self.fft_size as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window: Window,
}

impl StftConfig {
    pub fn hann(fft_size: usize, hop: usize) -> Self {
        Self {
            fft_size,
            hop,
            window: Window::Hann,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.fft_size.is_power_of_two() {
            return Err(Error::Contract(format!(
                "fft size {} is not a power of two",
                self.fft_size
            )));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::Contract(format!(
                "hop {} must be in 1..={}",
                self.hop, self.fft_size
            )));
        }
        Ok(())
    }
}

/// Hann-windowed magnitude STFT with `ceil(len / hop)` centered,
/// reflection-padded frames.
pub fn stft(clip: &AudioClip, fft_size: usize, hop: usize) -> Result<Spectrogram> {
    stft_with(clip.samples(), clip.sample_rate(), StftConfig::hann(fft_size, hop))
}

pub fn stft_with(samples: &[f64], sample_rate: u32, cfg: StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Contract("cannot analyse an empty clip".into()));
    }
    let n = cfg.fft_size;
    let frames = centered_frame_count(samples.len(), cfg.hop);
    let half = (n / 2) as isize;
    analyse(samples, sample_rate, cfg, frames, |f, t| {
        let pos = (f * cfg.hop) as isize - half + t as isize;
        Some(reflect_index(pos, samples.len()))
    })
}

/// Block-aligned STFT: frame `i` covers samples `[i * fft_size, (i + 1) * fft_size)`,
/// zero-padded past the end. Frames line up with synthesis frames.
pub fn block_stft(samples: &[f64], sample_rate: u32, fft_size: usize, window: Window) -> Result<Spectrogram> {
    let cfg = StftConfig {
        fft_size,
        hop: fft_size,
        window,
    };
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Contract("cannot analyse an empty clip".into()));
    }
    let frames = samples.len().div_ceil(fft_size);
    analyse(samples, sample_rate, cfg, frames, |f, t| {
        let pos = f * fft_size + t;
        (pos < samples.len()).then_some(pos)
    })
}

fn analyse(
    samples: &[f64],
    sample_rate: u32,
    cfg: StftConfig,
    frames: usize,
    index: impl Fn(usize, usize) -> Option<usize>,
) -> Result<Spectrogram> {
    let n = cfg.fft_size;
    let bins = n / 2 + 1;
    let window = cfg.window.coefficients(n);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut mags = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        for (t, b) in buf.iter_mut().enumerate() {
            let v = index(f, t).map_or(0.0, |i| samples[i]);
            *b = Complex::new(v * window[t], 0.0);
        }
        fft.process(&mut buf);
        mags.extend(buf[..bins].iter().map(|c| c.norm()));
    }
    Spectrogram::new(mags, frames, n, cfg.hop, sample_rate)
}
