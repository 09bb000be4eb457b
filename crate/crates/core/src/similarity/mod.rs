//! Embeddings, per-class Gaussian statistics and normalized Mahalanobis
//! similarity scores.
//!
//! Channel semantics are fixed everywhere: 0 means closest to the class
//! distribution, 1 means farthest (over the fitting set).

mod embedder;
mod kde;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use embedder::{embed_builtin, mel_filter_matrix, BuiltinEmbedder, EmbedderConfig};
pub use kde::{density_at, kde, silverman_bandwidth, DensityEstimate, MIN_BANDWIDTH, REPORT_GRID};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::linalg;

pub const DEFAULT_EPSILON_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Builtin,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub clip_id: String,
    pub source: EmbeddingSource,
}

/// Per-class normalized distances in `[0, 1]`, in class-label order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimilarityVector {
    channels: Vec<f64>,
}

impl SimilarityVector {
    pub fn new(channels: Vec<f64>) -> Result<Self> {
        if let Some(i) = channels
            .iter()
            .position(|v| !(v.is_finite() && (0.0..=1.0).contains(v)))
        {
            return Err(Error::Contract(format!("channel {i} out of range")));
        }
        Ok(Self { channels })
    }

    /// All channels set to `value`.
    pub fn uniform(n: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; n])
    }

    pub fn channels(&self) -> &[f64] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub label: String,
    pub mu: Vec<f64>,
    /// Row-major `d × d`, loading included.
    pub sigma: Vec<f64>,
    pub epsilon: f64,
    pub md_min: f64,
    pub md_max: f64,
    #[serde(skip)]
    chol: Vec<f64>,
}

impl ClassStats {
    /// Builds stats from explicit moments, validating positive definiteness.
    pub fn from_moments(label: impl Into<String>, mu: Vec<f64>, sigma: Vec<f64>, epsilon: f64) -> Result<Self> {
        let d = mu.len();
        if sigma.len() != d * d {
            return Err(Error::Dimension {
                expected: d * d,
                found: sigma.len(),
            });
        }
        let chol = linalg::cholesky(&sigma, d)?;
        Ok(Self {
            label: label.into(),
            mu,
            sigma,
            epsilon,
            md_min: 0.0,
            md_max: 0.0,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Lower Cholesky factor of `sigma`, row-major.
    pub fn cholesky(&self) -> &[f64] {
        &self.chol
    }

    fn refactor(&mut self) -> Result<()> {
        self.chol = linalg::cholesky(&self.sigma, self.dim())?;
        Ok(())
    }

    /// Min-max normalization with the stored range, clamped to `[0, 1]`.
    /// A degenerate range maps everything to 0.
    pub fn normalize(&self, md: f64) -> f64 {
        if self.md_max > self.md_min {
            ((md - self.md_min) / (self.md_max - self.md_min)).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    /// Differentiable normalization with a smooth clamp of width `tau`.
    pub fn normalize_smooth<'t>(&self, md: Var<'t>, tau: f64) -> Var<'t> {
        if self.md_max > self.md_min {
            let u = md
                .add_scalar(-self.md_min)
                .scale(1.0 / (self.md_max - self.md_min));
            smooth_clamp(u, tau)
        } else {
            md.scale(0.0)
        }
    }
}

/// `u - τ·softplus((u - 1)/τ) + τ·softplus(-u/τ)`: follows `u` inside
/// `[0, 1]` and flattens smoothly outside; tends to a hard clamp as
/// `τ → 0`.
pub fn smooth_clamp<'t>(u: Var<'t>, tau: f64) -> Var<'t> {
    let upper = u.add_scalar(-1.0).softplus(tau);
    let lower = u.neg().softplus(tau);
    u.sub(upper).add(lower)
}

/// Plain-value version of [`smooth_clamp`].
pub fn smooth_clamp_value(u: f64, tau: f64) -> f64 {
    let sp = |x: f64| {
        let z = x / tau;
        tau * (z.max(0.0) + (-z.abs()).exp().ln_1p())
    };
    u - sp(u - 1.0) + sp(-u)
}

/// Sample mean, `n - 1` covariance and relative diagonal loading
/// `ε = epsilon_scale · mean(diag Σ)` (or `epsilon_scale` if Σ is zero).
pub fn fit_class_stats(label: &str, embeddings: &[Vec<f64>], epsilon_scale: f64) -> Result<ClassStats> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::Stats(format!(
            "class `{label}` has {n} embedding(s); at least 2 are required"
        )));
    }
    if !(epsilon_scale > 0.0) {
        return Err(Error::Stats("epsilon_scale must be positive".into()));
    }
    let d = embeddings[0].len();
    for e in embeddings {
        if e.len() != d {
            return Err(Error::Dimension {
                expected: d,
                found: e.len(),
            });
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite embedding in class `{label}`")));
        }
    }
    let mut mu = vec![0.0; d];
    for e in embeddings {
        for (m, v) in mu.iter_mut().zip(e) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);

    let mut sigma = vec![0.0; d * d];
    for e in embeddings {
        let c: Vec<f64> = e.iter().zip(&mu).map(|(a, b)| a - b).collect();
        for i in 0..d {
            for j in i..d {
                sigma[i * d + j] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = sigma[i * d + j] / (n - 1) as f64;
            sigma[i * d + j] = v;
            sigma[j * d + i] = v;
        }
    }
    let mean_diag = (0..d).map(|i| sigma[i * d + i]).sum::<f64>() / d as f64;
    let epsilon = if mean_diag > 0.0 {
        epsilon_scale * mean_diag
    } else {
        epsilon_scale
    };
    for i in 0..d {
        sigma[i * d + i] += epsilon;
    }
    ClassStats::from_moments(label, mu, sigma, epsilon)
}

/// Mahalanobis distance via a Cholesky solve.
pub fn mahalanobis(x: &[f64], stats: &ClassStats) -> Result<f64> {
    if x.len() != stats.dim() {
        return Err(Error::Dimension {
            expected: stats.dim(),
            found: x.len(),
        });
    }
    let diff: Vec<f64> = x.iter().zip(&stats.mu).map(|(a, b)| a - b).collect();
    let y = linalg::solve_lower(&stats.chol, &diff);
    Ok(y.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Raw distance vectors for `clip_ids`, one channel per entry of `stats`.
pub fn compute_similarity_matrix(
    clip_ids: &[String],
    embeddings: &BTreeMap<String, Embedding>,
    stats: &[ClassStats],
) -> Result<Vec<Vec<f64>>> {
    clip_ids
        .iter()
        .map(|id| {
            let e = embeddings
                .get(id)
                .ok_or_else(|| Error::MissingEmbedding(id.clone()))?;
            stats.iter().map(|s| mahalanobis(&e.vector, s)).collect()
        })
        .collect()
}

/// Min-max normalizes each channel over `raw` and stores the range in
/// `stats`.
pub fn normalize_scores(raw: &[Vec<f64>], stats: &mut [ClassStats]) -> Result<Vec<SimilarityVector>> {
    if raw.is_empty() {
        return Err(Error::EmptyDataset("no distances to normalize".into()));
    }
    let n = stats.len();
    if let Some(row) = raw.iter().find(|r| r.len() != n) {
        return Err(Error::Dimension {
            expected: n,
            found: row.len(),
        });
    }
    for (c, s) in stats.iter_mut().enumerate() {
        let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r[c]), hi.max(r[c]))
        });
        s.md_min = lo;
        s.md_max = hi;
    }
    raw.iter()
        .map(|r| SimilarityVector::new(r.iter().zip(stats.iter()).map(|(v, s)| s.normalize(*v)).collect()))
        .collect()
}

/// Where the embeddings behind a stats set come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum StatsSource {
    Builtin { embedder: EmbedderConfig },
    External { dim: usize },
}

/// The fitted statistics of every class, in channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStatsSet {
    pub source: StatsSource,
    pub classes: Vec<ClassStats>,
}

const STATS_FORMAT: &str = "format=1";

impl ClassStatsSet {
    /// Fits every class (in parallel) and normalizes over all fitted
    /// embeddings. `groups` is in channel order.
    pub fn fit(source: StatsSource, groups: &[(String, Vec<Vec<f64>>)], epsilon_scale: f64) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::EmptyDataset("no classes to fit".into()));
        }
        let mut classes: Vec<ClassStats> = groups
            .par_iter()
            .map(|(label, e)| fit_class_stats(label, e, epsilon_scale))
            .collect::<Result<_>>()?;
        let raw: Vec<Vec<f64>> = groups
            .iter()
            .flat_map(|(_, e)| e.iter())
            .map(|v| classes.iter().map(|s| mahalanobis(v, s)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        normalize_scores(&raw, &mut classes)?;
        Ok(Self { source, classes })
    }

    pub fn labels(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.label.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.classes.first().map_or(0, |c| c.dim())
    }

    pub fn raw_distances(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.classes.iter().map(|s| mahalanobis(x, s)).collect()
    }

    /// Clamped normalized similarity of one embedding.
    pub fn score(&self, x: &[f64]) -> Result<SimilarityVector> {
        let raw = self.raw_distances(x)?;
        SimilarityVector::new(raw.iter().zip(&self.classes).map(|(v, s)| s.normalize(*v)).collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(STATS_FORMAT);
        out.push('\n');
        out.push_str(&serde_json::to_string(&self.source).expect("source serializes"));
        out.push('\n');
        for c in &self.classes {
            out.push_str(&serde_json::to_string(c).expect("stats serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(l) if l.trim() == STATS_FORMAT => {}
            other => {
                return Err(Error::Format(format!(
                    "class stats header must be `{STATS_FORMAT}`, found {:?}",
                    other.unwrap_or("")
                )))
            }
        }
        let source: StatsSource = serde_json::from_str(lines.next().unwrap_or(""))
            .map_err(|e| Error::Format(format!("class stats source line: {e}")))?;
        let mut classes = Vec::new();
        for l in lines.filter(|l| !l.trim().is_empty()) {
            let mut c: ClassStats =
                serde_json::from_str(l).map_err(|e| Error::Format(format!("class stats record: {e}")))?;
            c.refactor()?;
            classes.push(c);
        }
        if classes.is_empty() {
            return Err(Error::Format("class stats file has no classes".into()));
        }
        let d = classes[0].dim();
        if let Some(c) = classes.iter().find(|c| c.dim() != d) {
            return Err(Error::Dimension {
                expected: d,
                found: c.dim(),
            });
        }
        Ok(Self { source, classes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Hex SHA-256 of the serialized set.
    pub fn content_hash(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Writes `dim=<d>` followed by `clip_id,v1,...,vd` records. Values use
/// shortest round-trip decimal formatting.
pub fn write_embeddings(path: &Path, embeddings: &[Embedding]) -> Result<()> {
    std::fs::write(path, embeddings_to_text(embeddings)?).map_err(|e| Error::io(path, e))
}

pub fn embeddings_to_text(embeddings: &[Embedding]) -> Result<String> {
    let d = embeddings.first().map_or(0, |e| e.vector.len());
    let mut out = format!("dim={d}\n");
    for e in embeddings {
        if e.vector.len() != d {
            return Err(Error::Dimension {
                expected: d,
                found: e.vector.len(),
            });
        }
        if e.clip_id.contains([',', '\n', '\r']) {
            return Err(Error::Format(format!("clip id `{}` contains a separator", e.clip_id)));
        }
        out.push_str(&e.clip_id);
        for v in &e.vector {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn load_external_embeddings(path: &Path) -> Result<BTreeMap<String, Embedding>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, EmbeddingSource::External)
}

pub fn parse_embeddings(text: &str, source: EmbeddingSource) -> Result<BTreeMap<String, Embedding>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let d: usize = header
        .strip_prefix("dim=")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::Format(format!("embeddings header must be `dim=<d>`, found {header:?}")))?;
    let mut out = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let id = parts.next().unwrap_or("").trim().to_string();
        let vector: Vec<f64> = parts
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("line {}: {e}", i + 2)))
            })
            .collect::<Result<_>>()?;
        if vector.len() != d {
            return Err(Error::Format(format!(
                "line {}: clip `{id}` has {} values, header says {d}",
                i + 2,
                vector.len()
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("line {}: non-finite value", i + 2)));
        }
        if out.contains_key(&id) {
            return Err(Error::Format(format!("duplicate clip id `{id}`")));
        }
        out.insert(
            id.clone(),
            Embedding {
                vector,
                clip_id: id,
                source,
            },
        );
    }
    Ok(out)
}
