//! Sparse peak waveform: the input gated to detected percussive peaks.

use super::{block_stft, hpss, median, HpssConfig, Window};
use crate::audio_io::AudioClip;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakConfig {
    /// Frame (block) length in samples; frames are `[i * f, (i + 1) * f)`.
    pub frame_len: usize,
    pub hpss: HpssConfig,
    /// Threshold is `median + mad_factor * MAD` of the percussive envelope.
    pub mad_factor: f64,
    /// Minimum distance between kept peaks, in frames.
    pub min_distance: usize,
}

impl Default for PeakConfig {
    fn default() -> Self {
        Self {
            frame_len: 256,
            hpss: HpssConfig::default(),
            mad_factor: 3.0,
            min_distance: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsePeakWaveform {
    pub samples: Vec<f64>,
    /// Sorted peak frame indices.
    pub peak_frames: Vec<usize>,
    pub frame_len: usize,
}

/// Detects percussive peaks per frame and gates the clip to those frames.
pub fn extract_peak_sparse(clip: &AudioClip, cfg: &PeakConfig) -> Result<SparsePeakWaveform> {
    let x = clip.samples();
    let f = cfg.frame_len;
    let spec = block_stft(x, clip.sample_rate(), f, Window::Rectangular)?;

    // Shrink the kernel for tiny inputs so separation is always defined.
    let max_axis = spec.frames().max(spec.bins());
    let mut hcfg = cfg.hpss;
    if hcfg.kernel > max_axis {
        hcfg.kernel = if max_axis % 2 == 1 { max_axis } else { max_axis - 1 };
    }
    let (_, perc) = hpss(&spec, hcfg)?;

    let envelope: Vec<f64> = (0..perc.frames())
        .map(|i| perc.frame(i).iter().map(|m| m * m).sum())
        .collect();
    let peak_frames = pick_peaks(&envelope, cfg.mad_factor, cfg.min_distance);

    let mut samples = vec![0.0; x.len()];
    for &p in &peak_frames {
        let end = ((p + 1) * f).min(x.len());
        samples[p * f..end].copy_from_slice(&x[p * f..end]);
    }
    Ok(SparsePeakWaveform {
        samples,
        peak_frames,
        frame_len: f,
    })
}

fn pick_peaks(envelope: &[f64], mad_factor: f64, min_distance: usize) -> Vec<usize> {
    if envelope.is_empty() {
        return Vec::new();
    }
    let mut scratch = envelope.to_vec();
    let med = median(&mut scratch);
    let mut dev: Vec<f64> = envelope.iter().map(|v| (v - med).abs()).collect();
    let mad = median(&mut dev);
    let threshold = med + mad_factor * mad;

    let n = envelope.len();
    let mut candidates: Vec<usize> = (0..n)
        .filter(|&i| {
            let v = envelope[i];
            v > threshold
                && (i == 0 || v >= envelope[i - 1])
                && (i + 1 == n || v >= envelope[i + 1])
        })
        .collect();
    candidates.sort_by(|&a, &b| envelope[b].total_cmp(&envelope[a]).then(a.cmp(&b)));

    let mut kept: Vec<usize> = Vec::new();
    for c in candidates {
        if kept.iter().all(|&k| k.abs_diff(c) >= min_distance) {
            kept.push(c);
        }
    }
    kept.sort_unstable();
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip_with_impulses(len: usize, at: &[usize]) -> AudioClip {
        let mut x = vec![0.0; len];
        for &i in at {
            x[i] = 0.9;
        }
        AudioClip::new(x, 44_100, "imp").unwrap()
    }

    #[test]
    fn single_impulse_lands_in_its_block() {
        // 5000 / 256 = 19.5 -> block 19, the only frame with energy.
        let clip = clip_with_impulses(44_100, &[5000]);
        let xs = extract_peak_sparse(&clip, &PeakConfig::default()).unwrap();
        assert_eq!(xs.peak_frames, vec![19]);
        for (i, v) in xs.samples.iter().enumerate() {
            if !(19 * 256..20 * 256).contains(&i) {
                assert_eq!(*v, 0.0);
            }
        }
        assert_eq!(xs.samples[5000], 0.9);
    }

    #[test]
    fn silence_has_no_peaks() {
        let clip = AudioClip::new(vec![0.0; 8192], 44_100, "s").unwrap();
        let xs = extract_peak_sparse(&clip, &PeakConfig::default()).unwrap();
        assert!(xs.peak_frames.is_empty());
        assert!(xs.samples.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_separated_impulses() {
        // blocks 10 and 25 (15 frames apart)
        let clip = clip_with_impulses(44_100, &[10 * 256 + 100, 25 * 256 + 7]);
        let xs = extract_peak_sparse(&clip, &PeakConfig::default()).unwrap();
        assert_eq!(xs.peak_frames, vec![10, 25]);
    }

    #[test]
    fn gating_is_exact() {
        let x: Vec<f64> = (0..6000)
            .map(|i| if i % 997 == 0 { 0.8 } else { 0.01 * ((i * 31 % 7) as f64 - 3.0) })
            .collect();
        let clip = AudioClip::new(x.clone(), 44_100, "g").unwrap();
        let xs = extract_peak_sparse(&clip, &PeakConfig::default()).unwrap();
        assert!(!xs.peak_frames.is_empty());
        for (i, v) in xs.samples.iter().enumerate() {
            let on = xs.peak_frames.contains(&(i / 256));
            if on {
                assert_eq!(*v, x[i]);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn min_distance_suppresses_neighbours() {
        let env = [0.0, 5.0, 0.0, 4.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0];
        assert_eq!(pick_peaks(&env, 3.0, 4), vec![1, 8]);
    }
}
