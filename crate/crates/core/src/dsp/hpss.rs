//! Harmonic-percussive separation by median filtering with hard masks.

use super::{median, symmetric_index, Spectrogram};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HpssConfig {
    /// Median filter length along both axes (odd).
    pub kernel: usize,
    /// `(harmonic, percussive)` margins.
    pub margin: (f64, f64),
}

impl Default for HpssConfig {
    fn default() -> Self {
        Self {
            kernel: 31,
            margin: (1.0, 3.0),
        }
    }
}

/// Splits `spec` into `(harmonic, percussive)`.
///
/// `H̃` is the median along time, `P̃` along frequency (half-sample
/// symmetric edges). A bin goes to the harmonic output where
/// `H̃ >= margin.0 * P̃` and to the percussive output where
/// `P̃ >= margin.1 * H̃`; masked outputs are exact copies of the input.
pub fn hpss(spec: &Spectrogram, cfg: HpssConfig) -> Result<(Spectrogram, Spectrogram)> {
    if cfg.kernel % 2 == 0 {
        return Err(Error::Contract(format!("kernel {} must be odd", cfg.kernel)));
    }
    let (frames, bins) = (spec.frames(), spec.bins());
    if cfg.kernel > frames && cfg.kernel > bins {
        return Err(Error::Contract(format!(
            "kernel {} exceeds both spectrogram axes ({frames} frames, {bins} bins)",
            cfg.kernel
        )));
    }
    let half = (cfg.kernel / 2) as isize;
    let mut window = vec![0.0; cfg.kernel];

    let mut harm_med = vec![0.0; frames * bins];
    for b in 0..bins {
        for f in 0..frames {
            for (o, w) in window.iter_mut().enumerate() {
                let ff = symmetric_index(f as isize + o as isize - half, frames);
                *w = spec.get(ff, b);
            }
            harm_med[f * bins + b] = median(&mut window);
        }
    }
    let mut perc_med = vec![0.0; frames * bins];
    for f in 0..frames {
        for b in 0..bins {
            for (o, w) in window.iter_mut().enumerate() {
                let bb = symmetric_index(b as isize + o as isize - half, bins);
                *w = spec.get(f, bb);
            }
            perc_med[f * bins + b] = median(&mut window);
        }
    }

    let x = spec.magnitudes();
    let (mh, mp) = cfg.margin;
    let harmonic = x
        .iter()
        .zip(harm_med.iter().zip(&perc_med))
        .map(|(&v, (&h, &p))| if h >= mh * p { v } else { 0.0 })
        .collect();
    let percussive = x
        .iter()
        .zip(harm_med.iter().zip(&perc_med))
        .map(|(&v, (&h, &p))| if p >= mp * h { v } else { 0.0 })
        .collect();
    Ok((spec.with_magnitudes(harmonic), spec.with_magnitudes(percussive)))
}
