use std::io::Write;
use std::path::Path;

use super::{stft, Spectrogram};
use crate::audio_io::AudioClip;
use crate::error::{Error, Result};

pub const LOUDNESS_FLOOR_DB: f64 = -80.0;

/// Frame-rate conditioning features, both in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureTrack {
    pub centroid: Vec<f64>,
    pub loudness: Vec<f64>,
}

impl FeatureTrack {
    pub fn new(centroid: Vec<f64>, loudness: Vec<f64>) -> Result<Self> {
        if centroid.len() != loudness.len() {
            return Err(Error::Shape(format!(
                "centroid has {} frames, loudness {}",
                centroid.len(),
                loudness.len()
            )));
        }
        if centroid
            .iter()
            .chain(&loudness)
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::Contract("feature values must lie in [0, 1]".into()));
        }
        Ok(Self { centroid, loudness })
    }

    pub fn frames(&self) -> usize {
        self.centroid.len()
    }
}

/// Magnitude-weighted mean frequency per frame as a fraction of Nyquist.
/// Silent frames give 0.
pub fn spectral_centroid(spec: &Spectrogram) -> Vec<f64> {
    let top = (spec.bins() - 1) as f64;
    (0..spec.frames())
        .map(|f| {
            let frame = spec.frame(f);
            let total: f64 = frame.iter().sum();
            if total <= 0.0 {
                return 0.0;
            }
            let weighted: f64 = frame.iter().enumerate().map(|(b, m)| b as f64 * m).sum();
            (weighted / total / top).clamp(0.0, 1.0)
        })
        .collect()
}

/// IEC 61672 A-weighting gain in dB at `freq` Hz (`-inf` at DC).
pub fn a_weighting_db(freq: f64) -> f64 {
    let f2 = freq * freq;
    let num = 12194.0f64.powi(2) * f2 * f2;
    let den = (f2 + 20.6f64.powi(2))
        * ((f2 + 107.7f64.powi(2)) * (f2 + 737.9f64.powi(2))).sqrt()
        * (f2 + 12194.0f64.powi(2));
    20.0 * (num / den).log10() + 2.0
}

/// A-weighted frame power in dB, before flooring.
///
/// Magnitudes are scaled by `2 / sum(window)` so a full-scale sinusoid on
/// an exact bin reads 1.0 in that bin; power is the sum over bins of the
/// squared weighted magnitudes.
pub fn loudness_db(spec: &Spectrogram) -> Vec<f64> {
    let n = spec.fft_size;
    // sum of a periodic Hann window
    let norm = 2.0 / (n as f64 / 2.0);
    let weights: Vec<f64> = (0..spec.bins())
        .map(|b| {
            let db = a_weighting_db(spec.bin_hz(b));
            if db.is_finite() {
                10f64.powf(db / 20.0)
            } else {
                0.0
            }
        })
        .collect();
    (0..spec.frames())
        .map(|f| {
            let p: f64 = spec
                .frame(f)
                .iter()
                .zip(&weights)
                .map(|(m, w)| (m * norm * w).powi(2))
                .sum();
            10.0 * p.log10()
        })
        .collect()
}

/// Loudness floored at -80 dB and mapped to `[0, 1]` by `(L + 80) / 80`.
pub fn loudness(spec: &Spectrogram) -> Vec<f64> {
    loudness_db(spec)
        .into_iter()
        .map(|db| {
            let db = if db.is_nan() { LOUDNESS_FLOOR_DB } else { db };
            ((db.max(LOUDNESS_FLOOR_DB) - LOUDNESS_FLOOR_DB) / -LOUDNESS_FLOOR_DB).clamp(0.0, 1.0)
        })
        .collect()
}

/// Centroid and loudness tracks for a clip.
pub fn extract_features(clip: &AudioClip, fft_size: usize, hop: usize) -> Result<FeatureTrack> {
    let spec = stft(clip, fft_size, hop)?;
    FeatureTrack::new(spectral_centroid(&spec), loudness(&spec))
}

/// Writes `frame<TAB>centroid<TAB>loudness` records, one per line.
pub fn write_feature_track(track: &FeatureTrack, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (i, (c, l)) in track.centroid.iter().zip(&track.loudness).enumerate() {
        out.push_str(&format!("{i}\t{c}\t{l}\n"));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft_with, StftConfig};

    fn single_frame(mags: Vec<f64>, fft: usize) -> Spectrogram {
        Spectrogram::new(mags, 1, fft, fft, 44_100).unwrap()
    }

    #[test]
    fn centroid_edge_cases() {
        let mut m = vec![0.0; 129];
        m[128] = 3.0;
        assert_eq!(spectral_centroid(&single_frame(m, 256)), vec![1.0]);
        assert_eq!(spectral_centroid(&single_frame(vec![0.0; 129], 256)), vec![0.0]);
    }

    #[test]
    fn centroid_of_flat_spectrum() {
        // weighted-mean oracle over 129 bins: sum(b) / 129 / 128
        let oracle = (0..129).map(|b| b as f64).sum::<f64>() / 129.0 / 128.0;
        let c = spectral_centroid(&single_frame(vec![0.7; 129], 256));
        assert!((c[0] - oracle).abs() < 1e-12);
        assert!((c[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn centroid_is_scale_invariant() {
        let m: Vec<f64> = (0..129).map(|b| ((b * 7 % 13) as f64).sqrt()).collect();
        let scaled: Vec<f64> = m.iter().map(|v| v * 4.5).collect();
        let a = spectral_centroid(&single_frame(m, 256))[0];
        let b = spectral_centroid(&single_frame(scaled, 256))[0];
        assert!((a - b).abs() < 1e-14);
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn a_weighting_reference_points() {
        assert!(a_weighting_db(1000.0).abs() < 0.01);
        assert!((a_weighting_db(100.0) + 19.1).abs() < 0.1);
        assert!((a_weighting_db(10_000.0) + 2.5).abs() < 0.1);
        assert_eq!(a_weighting_db(0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn silence_and_doubling() {
        let s = single_frame(vec![0.0; 129], 256);
        assert_eq!(loudness(&s), vec![0.0]);
        let m: Vec<f64> = (0..129).map(|b| 0.01 * (1.0 + b as f64)).collect();
        let doubled: Vec<f64> = m.iter().map(|v| v * 2.0).collect();
        let a = loudness_db(&single_frame(m, 256))[0];
        let b = loudness_db(&single_frame(doubled, 256))[0];
        assert!((b - a - 20.0 * 2f64.log10()).abs() < 1e-9);
        assert!((b - a - 6.0206).abs() < 1e-4);
    }

    #[test]
    fn full_scale_sine_near_one_khz() {
        // bin 6 at fft 256 and 44.1 kHz is 1033.6 Hz
        let n = 256;
        let sr = 44_100u32;
        let k = 6usize;
        let freq = k as f64 * sr as f64 / n as f64;
        let x: Vec<f64> = (0..4 * n)
            .map(|t| (2.0 * std::f64::consts::PI * freq * t as f64 / sr as f64).sin())
            .collect();
        let spec = stft_with(&x, sr, StftConfig::hann(n, n)).unwrap();
        let got = loudness_db(&spec)[2];

        // Oracle: a periodic-Hann windowed on-bin sinusoid has normalized
        // magnitude 1 at bin k and 1/2 at k +- 1, zero elsewhere.
        let weight = |b: usize| 10f64.powf(a_weighting_db(b as f64 * sr as f64 / n as f64) / 20.0);
        let p = weight(k).powi(2) + (0.5 * weight(k - 1)).powi(2) + (0.5 * weight(k + 1)).powi(2);
        let oracle = 10.0 * p.log10();
        assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
        // close to the 0 dB reference of a 1 kHz tone
        assert!(weight(k).log10().abs() < 0.01);
    }

    #[test]
    fn feature_track_shape() {
        let clip = AudioClip::new(vec![0.25; 1024], 44_100, "c").unwrap();
        let t = extract_features(&clip, 256, 256).unwrap();
        assert_eq!(t.frames(), 4);
        assert!(t.loudness.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
