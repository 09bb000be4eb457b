//! Audio clip ingestion, dataset manifests and waveform export.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;
pub const DEFAULT_CLIP_SECONDS: f64 = 4.0;

/// Fixed-rate mono sample buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
    id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32, id: impl Into<String>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Contract("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
            id: id.into(),
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Zero-pads or truncates to exactly `len` samples.
    pub fn fit_length(mut self, len: usize) -> Self {
        self.samples.resize(len, 0.0);
        self
    }
}

/// Number of samples for a clip of `seconds` at `sample_rate`.
pub fn clip_samples(sample_rate: u32, seconds: f64) -> usize {
    (sample_rate as f64 * seconds).round() as usize
}

/// Reads a RIFF/WAVE file, mixes to mono and pads/truncates to
/// `round(target_rate * target_duration)` samples.
///
/// Integer PCM is scaled by the full-scale value of its bit depth
/// (`32767 -> 32767 / 32768` for 16-bit).
pub fn load_clip(path: &Path, target_rate: u32, target_duration: f64) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.sample_rate != target_rate {
        return Err(Error::Rate {
            found: spec.sample_rate,
            expected: target_rate,
        });
    }
    let channels = spec.channels.max(1) as usize;
    let fmt_err = |e: hound::Error| Error::Format(format!("{}: {e}", path.display()));
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(Error::Format(format!(
                    "{}: unsupported float depth {}",
                    path.display(),
                    spec.bits_per_sample
                )));
            }
            reader
                .into_samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<std::result::Result<_, _>>()
                .map_err(fmt_err)?
        }
        hound::SampleFormat::Int => {
            let full_scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / full_scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(fmt_err)?
        }
    };
    let mono: Vec<f64> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    let id = path.to_string_lossy().into_owned();
    Ok(AudioClip::new(mono, target_rate, id)?.fit_length(clip_samples(target_rate, target_duration)))
}

/// Sample encoding for [`write_clip`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WavEncoding {
    #[default]
    Pcm16,
    Float32,
}

/// Writes a mono WAV file. Non-finite samples are rejected before the
/// file is created. PCM output rounds to the nearest 1/32768 step and
/// clips to the 16-bit range.
pub fn write_clip(clip: &AudioClip, path: &Path, encoding: WavEncoding) -> Result<()> {
    let bytes = encode_wav(clip.samples(), clip.sample_rate(), encoding)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// In-memory WAV encoding of mono samples.
pub fn encode_wav(samples: &[f64], sample_rate: u32, encoding: WavEncoding) -> Result<Vec<u8>> {
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("sample {i} is not finite")));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => hound::SampleFormat::Int,
            WavEncoding::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut cursor = std::io::Cursor::new(Vec::new());
    {
        let to_fmt = |e: hound::Error| Error::Format(e.to_string());
        let mut w = hound::WavWriter::new(&mut cursor, spec).map_err(to_fmt)?;
        for &s in samples {
            match encoding {
                WavEncoding::Pcm16 => {
                    let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    w.write_sample(q).map_err(to_fmt)?;
                }
                WavEncoding::Float32 => w.write_sample(s as f32).map_err(to_fmt)?,
            }
        }
        w.finalize().map_err(to_fmt)?;
    }
    Ok(cursor.into_inner())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Path as written in the manifest; doubles as the clip id.
    pub path: String,
    /// Path resolved against the manifest's directory.
    pub resolved: PathBuf,
    pub class: String,
    pub split: Split,
}

impl ManifestEntry {
    pub fn id(&self) -> &str {
        &self.path
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Unique labels in first-appearance order; defines channel order.
    pub class_labels: Vec<String>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_labels.len()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.class_labels.iter().position(|l| l == label)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.path == id)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    path: String,
    class: String,
    #[serde(default)]
    split: Option<Split>,
}

/// Default fraction of unlabelled entries assigned to train.
pub const DEFAULT_TRAIN_RATIO: f64 = 0.9;

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest_with_ratio(path, DEFAULT_TRAIN_RATIO)
}

pub fn load_manifest_with_ratio(path: &Path, train_ratio: f64) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base, train_ratio)
}

/// Parses line-delimited manifest records. Blank lines are skipped.
pub fn parse_manifest(text: &str, base: &Path, train_ratio: f64) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.class.trim().is_empty() {
            return Err(Error::Manifest {
                line: line_no,
                message: "empty class field".into(),
            });
        }
        if !seen.insert(rec.path.clone()) {
            return Err(Error::Manifest {
                line: line_no,
                message: format!("duplicate clip path `{}`", rec.path),
            });
        }
        if !labels.contains(&rec.class) {
            labels.push(rec.class.clone());
        }
        let split = rec.split.unwrap_or_else(|| hash_split(&rec.path, train_ratio));
        entries.push(ManifestEntry {
            resolved: base.join(&rec.path),
            path: rec.path,
            class: rec.class,
            split,
        });
    }
    Ok(DatasetManifest {
        entries,
        class_labels: labels,
    })
}

/// Deterministic split from the SHA-256 of the clip path.
pub fn hash_split(path: &str, train_ratio: f64) -> Split {
    let digest = Sha256::digest(path.as_bytes());
    let v = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let unit = (v >> 11) as f64 / (1u64 << 53) as f64;
    if unit < train_ratio {
        Split::Train
    } else {
        Split::Test
    }
}
