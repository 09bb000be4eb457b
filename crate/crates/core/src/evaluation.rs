//! Reconstruction metrics and the controllability harness.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio_io::AudioClip;
use crate::dsp::{stft_with, FeatureTrack, StftConfig};
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, DecoderWeights};
use crate::similarity::{kde, BuiltinEmbedder, ClassStatsSet, DensityEstimate, SimilarityVector, REPORT_GRID};
use crate::synthesis::{synthesize_with, SynthOps};
use crate::training::TrainingSet;

pub const LSD_FFT: usize = 2048;
pub const LSD_HOP: usize = 512;
const LSD_EPS: f64 = 1e-7;
/// Floor applied to `y` before taking logs in the exponential fit.
pub const OLS_Y_FLOOR: f64 = 1e-6;

/// Log-spectral distance between two equal-length signals.
pub fn lsd_samples(reference: &[f64], generated: &[f64]) -> Result<f64> {
    if reference.len() != generated.len() {
        return Err(Error::Dimension {
            expected: reference.len(),
            found: generated.len(),
        });
    }
    let cfg = StftConfig::hann(LSD_FFT, LSD_HOP);
    let a = stft_with(reference, 1, cfg)?;
    let b = stft_with(generated, 1, cfg)?;
    let mut total = 0.0;
    for f in 0..a.frames() {
        let sq: f64 = a
            .frame(f)
            .iter()
            .zip(b.frame(f))
            .map(|(x, y)| ((x + LSD_EPS).log10() - (y + LSD_EPS).log10()).powi(2))
            .sum();
        total += (sq / a.bins() as f64).sqrt();
    }
    Ok(total / a.frames() as f64)
}

pub fn lsd(reference: &AudioClip, generated: &AudioClip) -> Result<f64> {
    lsd_samples(reference.samples(), generated.samples())
}

/// Mean and covariance of a set of embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mu: Vec<f64>,
    /// Row-major `d × d`.
    pub sigma: Vec<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Sample mean and `n - 1` covariance (zero for a single sample).
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n == 0 {
            return Err(Error::EmptyDataset("no embeddings to fit".into()));
        }
        let d = samples[0].len();
        if let Some(bad) = samples.iter().find(|s| s.len() != d) {
            return Err(Error::Dimension {
                expected: d,
                found: bad.len(),
            });
        }
        let x = DMatrix::from_fn(n, d, |i, j| samples[i][j]);
        let mu = x.row_mean();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
        let div = if n > 1 { (n - 1) as f64 } else { 1.0 };
        let cov = centered.transpose() * &centered / div;
        Ok(Self {
            mu: mu.iter().copied().collect(),
            sigma: (0..d * d).map(|k| cov[(k / d, k % d)]).collect(),
        })
    }

    fn matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.sigma)
    }
}

/// `‖μ_A − μ_B‖² + tr(Σ_A + Σ_B − 2 (Σ_A Σ_B)^{1/2})`. The trace term is
/// taken from the symmetric `Σ_A^{1/2} Σ_B Σ_A^{1/2}`, which has the same
/// eigenvalues as `Σ_A Σ_B`, with eigenvalues floored at 0.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let (sa, sb) = (a.matrix(), b.matrix());
    let mean_term: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y).powi(2)).sum();
    let root_a = psd_sqrt(sa.clone());
    let inner = &root_a * &sb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let root_trace: f64 = inner.symmetric_eigenvalues().iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((mean_term + sa.trace() + sb.trace() - 2.0 * root_trace).max(0.0))
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let e = m.symmetric_eigen();
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Fitted `y = a·e^{b x}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub a: f64,
    pub b: f64,
    /// In log space, where the fit is performed.
    pub r_squared: f64,
    pub channel: usize,
    pub points: Vec<(f64, f64)>,
}

/// Closed-form least squares on `(x, ln max(y, 1e-6))`.
pub fn ols_exponential(points: &[(f64, f64)]) -> Result<RegressionResult> {
    if points.len() < 3 {
        return Err(Error::Contract(format!(
            "exponential fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Numeric("regression points must be finite".into()));
    }
    let n = points.len() as f64;
    let ly: Vec<f64> = points.iter().map(|(_, y)| y.max(OLS_Y_FLOOR).ln()).collect();
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("all x values are equal".into()));
    }
    let sxy: f64 = points.iter().zip(&ly).map(|(p, l)| (p.0 - mx) * (l - my)).sum();
    let b = sxy / sxx;
    let ln_a = my - b * mx;
    let ss_tot: f64 = ly.iter().map(|l| (l - my).powi(2)).sum();
    let ss_res: f64 = points
        .iter()
        .zip(&ly)
        .map(|(p, l)| (l - (ln_a + b * p.0)).powi(2))
        .sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(RegressionResult {
        a: ln_a.exp(),
        b,
        r_squared,
        channel: 0,
        points: points.to_vec(),
    })
}

/// One-channel similarity sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub channel: usize,
    pub steps: usize,
    pub fixed_value: f64,
    pub reference: String,
}

impl SweepSpec {
    pub fn new(channel: usize, reference: impl Into<String>) -> Self {
        Self {
            channel,
            steps: 100,
            fixed_value: 1.0,
            reference: reference.into(),
        }
    }

    /// `steps` evenly spaced values, endpoints exactly 0 and 1.
    pub fn grid(&self) -> Vec<f64> {
        let last = (self.steps - 1) as f64;
        (0..self.steps).map(|i| i as f64 / last).collect()
    }

    fn validate(&self, n_classes: usize) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::Contract("a sweep needs at least 2 steps".into()));
        }
        if !(0.0..=1.0).contains(&self.fixed_value) {
            return Err(Error::Contract(format!("fixed value {} outside [0, 1]", self.fixed_value)));
        }
        if self.channel >= n_classes {
            return Err(Error::Contract(format!(
                "channel {} out of range for {n_classes} classes",
                self.channel
            )));
        }
        Ok(())
    }
}

/// Judge embedder plus its statistics, independent of the conditioning.
pub struct Judge<'a> {
    pub embedder: &'a BuiltinEmbedder,
    pub stats: &'a ClassStatsSet,
}

/// Raw sweep of fixed weights: `(c, MD_N[channel])` with per-channel
/// min-max normalization over the sweep outputs.
pub fn sweep_weights(
    weights: &DecoderWeights,
    features: &FeatureTrack,
    clip_len: usize,
    spec: &SweepSpec,
    judge: &Judge<'_>,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let n = weights.config.n_classes;
    spec.validate(n)?;
    if judge.stats.len() != n {
        return Err(Error::MissingStats(format!(
            "judge covers {} classes, model has {n}",
            judge.stats.len()
        )));
    }
    let ops = SynthOps::new(&weights.config);
    let grid = spec.grid();
    let raw: Vec<Vec<f64>> = grid
        .par_iter()
        .map(|&c| {
            let mut s = vec![spec.fixed_value; n];
            s[spec.channel] = c;
            let out = synthesize_with(&ops, features, &SimilarityVector::new(s)?, weights, seed)?;
            let audio = out.export(clip_len);
            judge.stats.raw_distances(&judge.embedder.embed_samples(&audio))
        })
        .collect::<Result<_>>()?;
    let column: Vec<f64> = raw.iter().map(|r| r[spec.channel]).collect();
    let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Degenerate(
            "measured similarity is constant across the sweep".into(),
        ));
    }
    Ok(grid
        .into_iter()
        .zip(column)
        .map(|(c, v)| (c, (v - lo) / (hi - lo)))
        .collect())
}

/// Sweep of a trained checkpoint.
pub fn controllability_sweep(
    ckpt: &Checkpoint,
    reference: &AudioClip,
    spec: &SweepSpec,
    judge: &Judge<'_>,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if !ckpt.is_trained() {
        return Err(Error::Untrained);
    }
    let f = ckpt.weights.config.frame_len;
    let features = crate::dsp::extract_features(reference, f, f)?;
    sweep_weights(&ckpt.weights, &features, reference.len(), spec, judge, seed)
}

/// Sweep plus the exponential fit.
pub fn sweep_report(points: Vec<(f64, f64)>, channel: usize) -> Result<RegressionResult> {
    let mut r = ols_exponential(&points)?;
    r.channel = channel;
    Ok(r)
}

/// Per-class KDE of dataset similarity scores.
pub fn kde_report(scores: &[SimilarityVector], labels: &[String]) -> Result<Vec<(String, DensityEstimate)>> {
    if scores.is_empty() {
        return Err(Error::EmptyDataset("no similarity vectors".into()));
    }
    labels
        .iter()
        .enumerate()
        .map(|(j, label)| {
            let column: Vec<f64> = scores
                .iter()
                .map(|s| {
                    s.channels().get(j).copied().ok_or(Error::Dimension {
                        expected: labels.len(),
                        found: s.len(),
                    })
                })
                .collect::<Result<_>>()?;
            Ok((label.clone(), kde(&column, None, REPORT_GRID)?))
        })
        .collect()
}

/// `x<TAB>density_<label>...` rows.
pub fn density_table(report: &[(String, DensityEstimate)]) -> String {
    let mut out = String::from("x");
    for (label, _) in report {
        out.push_str(&format!("\t{label}"));
    }
    out.push('\n');
    if let Some((_, first)) = report.first() {
        for (i, x) in first.sample_points.iter().enumerate() {
            out.push_str(&x.to_string());
            for (_, d) in report {
                out.push_str(&format!("\t{}", d.density[i]));
            }
            out.push('\n');
        }
    }
    out
}

/// `c<TAB>md_n` rows followed by the fitted coefficients as comments.
pub fn regression_table(r: &RegressionResult) -> String {
    let mut out = String::from("c\tmd_n\n");
    for (c, y) in &r.points {
        out.push_str(&format!("{c}\t{y}\n"));
    }
    out.push_str(&format!("# a={}\n# b={}\n# r_squared={}\n", r.a, r.b, r.r_squared));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Class label, or `overall`.
    pub class: String,
    pub clips: usize,
    pub lsd_mean: f64,
    pub lsd_std: f64,
    pub frechet: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub rows: Vec<ReportRow>,
}

/// One `(metric, class, mean, std)` summary record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub class: String,
    pub mean: f64,
    pub std: f64,
}

impl ReconstructionReport {
    pub fn overall(&self) -> &ReportRow {
        self.rows.last().expect("report has an overall row")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("class\tclips\tlsd_mean\tlsd_std\tfrechet\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
                r.class, r.clips, r.lsd_mean, r.lsd_std, r.frechet
            ));
        }
        out
    }

    pub fn summary(&self) -> Vec<MetricSummary> {
        self.rows
            .iter()
            .flat_map(|r| {
                [
                    MetricSummary {
                        metric: "lsd".into(),
                        class: r.class.clone(),
                        mean: r.lsd_mean,
                        std: r.lsd_std,
                    },
                    MetricSummary {
                        metric: "frechet".into(),
                        class: r.class.clone(),
                        mean: r.frechet,
                        std: 0.0,
                    },
                ]
            })
            .collect()
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Pairwise LSD and judge-space Fréchet distance of reconstructions of a
/// test split, per class (in `labels` order) and overall.
pub fn evaluate_reconstruction(
    weights: &DecoderWeights,
    test: &TrainingSet,
    labels: &[String],
    judge: &BuiltinEmbedder,
    seed: u64,
) -> Result<ReconstructionReport> {
    if test.is_empty() {
        return Err(Error::EmptyDataset("test split has no clips".into()));
    }
    let ops = SynthOps::new(&weights.config);
    let rows: Vec<(String, f64, Vec<f64>, Vec<f64>)> = test
        .clips()
        .par_iter()
        .map(|c| {
            let out = synthesize_with(&ops, &c.features, &c.similarity, weights, seed)?;
            let audio = out.export(c.clip.len());
            let d = lsd_samples(c.clip.samples(), &audio)?;
            Ok((
                c.class.clone(),
                d,
                judge.embed_samples(c.clip.samples()),
                judge.embed_samples(&audio),
            ))
        })
        .collect::<Result<_>>()?;

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        groups.entry(r.0.as_str()).or_default().push(i);
    }
    let row_for = |name: &str, idx: &[usize]| -> Result<ReportRow> {
        let lsds: Vec<f64> = idx.iter().map(|&i| rows[i].1).collect();
        let refs: Vec<Vec<f64>> = idx.iter().map(|&i| rows[i].2.clone()).collect();
        let gens: Vec<Vec<f64>> = idx.iter().map(|&i| rows[i].3.clone()).collect();
        let (lsd_mean, lsd_std) = mean_std(&lsds);
        Ok(ReportRow {
            class: name.to_string(),
            clips: idx.len(),
            lsd_mean,
            lsd_std,
            frechet: frechet_distance(&GaussianStats::fit(&refs)?, &GaussianStats::fit(&gens)?)?,
        })
    };
    let mut out = Vec::new();
    for label in labels {
        if let Some(idx) = groups.get(label.as_str()) {
            out.push(row_for(label, idx)?);
        }
    }
    let all: Vec<usize> = (0..rows.len()).collect();
    out.push(row_for("overall", &all)?);
    Ok(ReconstructionReport { rows: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, n: usize) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn lsd_properties() {
        let a = noise(1, 6000);
        let b = noise(2, 6000);
        assert_eq!(lsd_samples(&a, &a).unwrap(), 0.0);
        let loud: Vec<f64> = a.iter().map(|v| v * 1e3).collect();
        let louder: Vec<f64> = loud.iter().map(|v| v * 10.0).collect();
        assert!((lsd_samples(&loud, &louder).unwrap() - 1.0).abs() < 1e-6);
        let ab = lsd_samples(&a, &b).unwrap();
        assert!((ab - lsd_samples(&b, &a).unwrap()).abs() < 1e-15);
        assert!(lsd_samples(&a, &b[..10]).is_err());
    }

    #[test]
    fn lsd_double_loop_oracle() {
        use rustfft::num_complex::Complex;
        let a = noise(3, 3000);
        let b = noise(4, 3000);
        let w = crate::dsp::hann_periodic(LSD_FFT);
        let frames = crate::dsp::centered_frame_count(3000, LSD_HOP);
        let spec = |x: &[f64], f: usize, k: usize| -> f64 {
            let mut acc = Complex::new(0.0, 0.0);
            for t in 0..LSD_FFT {
                let idx = crate::dsp::reflect_index((f * LSD_HOP) as isize - 1024 + t as isize, x.len());
                let ph = -2.0 * std::f64::consts::PI * (k * t) as f64 / LSD_FFT as f64;
                acc += Complex::new(ph.cos(), ph.sin()) * x[idx] * w[t];
            }
            acc.norm()
        };
        let mut total = 0.0;
        for f in 0..frames {
            let mut sq = 0.0;
            for k in 0..=LSD_FFT / 2 {
                let d = (spec(&a, f, k) + 1e-7).log10() - (spec(&b, f, k) + 1e-7).log10();
                sq += d * d;
            }
            total += (sq / (LSD_FFT / 2 + 1) as f64).sqrt();
        }
        let oracle = total / frames as f64;
        assert!((lsd_samples(&a, &b).unwrap() - oracle).abs() < 1e-10);
    }

    fn random_psd(d: usize, seed: u64) -> Vec<f64> {
        let m = noise(seed, d * d);
        let mut s = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                s[i * d + j] = (0..d).map(|k| m[i * d + k] * m[j * d + k]).sum();
            }
        }
        s
    }

    /// Eigenvalues of a symmetric row-major matrix by cyclic Jacobi rotations.
    fn jacobi_eigenvalues(mut m: Vec<f64>, d: usize) -> Vec<f64> {
        for _ in 0..100 {
            let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * d + j].powi(2)).sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..d {
                for q in p + 1..d {
                    let apq = m[p * d + q];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (m[q * d + q] - m[p * d + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..d {
                        let (mkp, mkq) = (m[k * d + p], m[k * d + q]);
                        m[k * d + p] = c * mkp - s * mkq;
                        m[k * d + q] = s * mkp + c * mkq;
                    }
                    for k in 0..d {
                        let (mpk, mqk) = (m[p * d + k], m[q * d + k]);
                        m[p * d + k] = c * mpk - s * mqk;
                        m[q * d + k] = s * mpk + c * mqk;
                    }
                }
            }
        }
        (0..d).map(|i| m[i * d + i]).collect()
    }

    fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = (0..d).map(|k| a[i * d + k] * b[k * d + j]).sum();
            }
        }
        out
    }

    /// Symmetric formulation with a Cholesky factor in place of `Σ_A^{1/2}`
    /// and Jacobi eigenvalues, independent of the linear algebra crate.
    fn frechet_oracle(a: &GaussianStats, b: &GaussianStats) -> f64 {
        let d = a.dim();
        // Σ_A = L Lᵀ by Cholesky; L Lᵀ Σ_B and Lᵀ Σ_B L share eigenvalues.
        let mut l = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let s: f64 = a.sigma[i * d + j] - (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum::<f64>();
                l[i * d + j] = if i == j { s.sqrt() } else { s / l[j * d + j] };
            }
        }
        let lt: Vec<f64> = (0..d * d).map(|k| l[(k % d) * d + k / d]).collect();
        let inner = matmul(&matmul(&lt, &b.sigma, d), &l, d);
        let tr: f64 = jacobi_eigenvalues(inner, d).iter().map(|v| v.max(0.0).sqrt()).sum();
        let dm: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y).powi(2)).sum();
        let trace = |m: &[f64]| (0..d).map(|i| m[i * d + i]).sum::<f64>();
        dm + trace(&a.sigma) + trace(&b.sigma) - 2.0 * tr
    }

    /// Trace term from the Denman–Beavers square root of `Σ_A Σ_B`.
    fn frechet_iterative(a: &GaussianStats, b: &GaussianStats) -> f64 {
        let d = a.dim();
        let sa = DMatrix::from_row_slice(d, d, &a.sigma);
        let sb = DMatrix::from_row_slice(d, d, &b.sigma);
        let mut y = &sa * &sb;
        let mut z = DMatrix::<f64>::identity(d, d);
        for _ in 0..100 {
            let yi = y.clone().try_inverse().unwrap();
            let zi = z.clone().try_inverse().unwrap();
            y = (&y + zi) * 0.5;
            z = (&z + yi) * 0.5;
        }
        let dm: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y).powi(2)).sum();
        dm + sa.trace() + sb.trace() - 2.0 * y.trace()
    }

    #[test]
    fn frechet_matches_symmetric_oracle() {
        for seed in 0..20 {
            let a = GaussianStats {
                mu: noise(seed, 3),
                sigma: random_psd(3, seed + 100),
            };
            let b = GaussianStats {
                mu: noise(seed + 50, 3),
                sigma: random_psd(3, seed + 200),
            };
            let f = frechet_distance(&a, &b).unwrap();
            assert!((f - frechet_oracle(&a, &b)).abs() < 1e-8, "seed {seed}");
            assert!((f - frechet_iterative(&a, &b)).abs() < 1e-8, "seed {seed}");
            assert!((f - frechet_distance(&b, &a).unwrap()).abs() < 1e-8);
            assert!(f >= 0.0);
            assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
        }
    }

    #[test]
    fn frechet_one_dimensional() {
        let a = GaussianStats {
            mu: vec![1.5],
            sigma: vec![4.0],
        };
        let b = GaussianStats {
            mu: vec![-0.5],
            sigma: vec![0.25],
        };
        let expect = 2.0f64.powi(2) + (2.0f64 - 0.5).powi(2);
        assert!((frechet_distance(&a, &b).unwrap() - expect).abs() < 1e-12);
        let c = GaussianStats {
            mu: vec![0.0, 0.0],
            sigma: vec![1.0, 0.0, 0.0, 1.0],
        };
        assert!(frechet_distance(&a, &c).is_err());
    }

    #[test]
    fn frechet_of_single_samples_is_the_mean_distance() {
        let a = GaussianStats::fit(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let b = GaussianStats::fit(&[vec![0.0, 2.0, 5.0]]).unwrap();
        assert!((frechet_distance(&a, &b).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_fit_double_loop() {
        let s: Vec<Vec<f64>> = (0..7).map(|i| noise(i, 3)).collect();
        let g = GaussianStats::fit(&s).unwrap();
        for j in 0..3 {
            let m: f64 = s.iter().map(|v| v[j]).sum::<f64>() / 7.0;
            assert!((g.mu[j] - m).abs() < 1e-14);
            for k in 0..3 {
                let mk: f64 = s.iter().map(|v| v[k]).sum::<f64>() / 7.0;
                let c: f64 = s.iter().map(|v| (v[j] - m) * (v[k] - mk)).sum::<f64>() / 6.0;
                assert!((g.sigma[j * 3 + k] - c).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn ols_exact_and_flat() {
        let pts: Vec<(f64, f64)> = (0..11).map(|i| i as f64 / 10.0).map(|x| (x, 2.0 * (0.5 * x).exp())).collect();
        let r = ols_exponential(&pts).unwrap();
        assert!((r.a - 2.0).abs() < 1e-10);
        assert!((r.b - 0.5).abs() < 1e-10);
        assert!((r.r_squared - 1.0).abs() < 1e-10);

        let flat: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 0.3)).collect();
        let r = ols_exponential(&flat).unwrap();
        assert!(r.b.abs() < 1e-15);
        assert!((r.a - 0.3).abs() < 1e-12);

        assert!(matches!(ols_exponential(&[(1.0, 1.0); 4]), Err(Error::Degenerate(_))));
        assert!(ols_exponential(&pts[..2]).is_err());
    }

    #[test]
    fn ols_scale_equivariance() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<(f64, f64)> = (0..20).map(|i| (i as f64 / 19.0, r.gen_range(0.1..2.0))).collect();
        let base = ols_exponential(&pts).unwrap();
        let scaled: Vec<(f64, f64)> = pts.iter().map(|(x, y)| (*x, 3.5 * y)).collect();
        let s = ols_exponential(&scaled).unwrap();
        assert!((s.a - 3.5 * base.a).abs() < 1e-10);
        assert!((s.b - base.b).abs() < 1e-10);
        assert!((s.r_squared - base.r_squared).abs() < 1e-10);
        assert!(base.r_squared <= 1.0);
    }

    #[test]
    fn ols_grid_search_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let pts: Vec<(f64, f64)> = (0..30)
            .map(|i| {
                let x = i as f64 / 29.0;
                (x, 0.7 * (1.3 * x).exp() * (1.0 + r.gen_range(-0.2..0.2)))
            })
            .collect();
        let fit = ols_exponential(&pts).unwrap();
        let sse = |la: f64, b: f64| -> f64 { pts.iter().map(|(x, y)| (y.ln() - la - b * x).powi(2)).sum() };
        let (mut best, mut bl, mut bb) = (f64::INFINITY, 0.0, 0.0);
        let mut refine = |cl: f64, cb: f64, span: f64| {
            for i in 0..=200 {
                for j in 0..=200 {
                    let la = cl - span + 2.0 * span * i as f64 / 200.0;
                    let b = cb - span + 2.0 * span * j as f64 / 200.0;
                    let e = sse(la, b);
                    if e < best {
                        best = e;
                        bl = la;
                        bb = b;
                    }
                }
            }
            (bl, bb)
        };
        let (l1, b1) = refine(0.0, 0.0, 3.0);
        let (l2, b2) = refine(l1, b1, 0.05);
        assert!((fit.a.ln() - l2).abs() < 1e-3);
        assert!((fit.b - b2).abs() < 1e-3);
    }

    #[test]
    fn sweep_grid_endpoints() {
        let s = SweepSpec::new(0, "x");
        let g = s.grid();
        assert_eq!(g.len(), 100);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[99], 1.0);
    }

    #[test]
    fn kde_report_shapes() {
        let labels: Vec<String> = (0..9).map(|i| format!("c{i}")).collect();
        let scores: Vec<SimilarityVector> = (0..30)
            .map(|i| SimilarityVector::new((0..9).map(|j| ((i * 7 + j * 3) % 10) as f64 / 10.0).collect()).unwrap())
            .collect();
        let rep = kde_report(&scores, &labels).unwrap();
        assert_eq!(rep.len(), 9);
        assert!(rep.iter().all(|(_, d)| d.density.len() == REPORT_GRID));
        let table = density_table(&rep);
        assert_eq!(table.lines().count(), REPORT_GRID + 1);

        let half: Vec<SimilarityVector> = (0..5).map(|_| SimilarityVector::new(vec![0.5]).unwrap()).collect();
        let d = &kde_report(&half, &["a".to_string()]).unwrap()[0].1;
        let peak = (0..REPORT_GRID).max_by(|&i, &j| d.density[i].total_cmp(&d.density[j])).unwrap();
        let best = d.sample_points.iter().map(|x| (x - 0.5).abs()).fold(f64::INFINITY, f64::min);
        assert!((d.sample_points[peak] - 0.5).abs() <= best + 1e-12);
    }

    #[test]
    fn kde_of_uniform_scores_is_flat() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let scores: Vec<SimilarityVector> = (0..10_000)
            .map(|_| SimilarityVector::new(vec![r.gen_range(0.0..1.0)]).unwrap())
            .collect();
        let d = &kde_report(&scores, &["u".to_string()]).unwrap()[0].1;
        for (x, y) in d.sample_points.iter().zip(&d.density) {
            if (0.1..=0.9).contains(x) {
                assert!((y - 1.0).abs() <= 0.2, "density {y} at {x}");
            }
        }
    }
}
