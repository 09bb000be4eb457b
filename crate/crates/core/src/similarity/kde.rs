use serde::Serialize;

use crate::error::{Error, Result};

pub const REPORT_GRID: usize = 256;
pub const MIN_BANDWIDTH: f64 = 1e-3;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityEstimate {
    pub sample_points: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
    pub n: usize,
}

/// Silverman's rule `1.06 σ̂ n^(-1/5)` with a floor of 1e-3. `σ̂` uses the
/// `n - 1` divisor and is 0 for a single sample.
pub fn silverman_bandwidth(scores: &[f64]) -> f64 {
    let n = scores.len();
    if n < 2 {
        return MIN_BANDWIDTH;
    }
    let mean = scores.iter().sum::<f64>() / n as f64;
    let var = scores.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (1.06 * var.sqrt() * (n as f64).powf(-0.2)).max(MIN_BANDWIDTH)
}

/// Gaussian-kernel density `(1 / n h) Σ K((x - x_i) / h)` at one point.
pub fn density_at(scores: &[f64], h: f64, x: f64) -> f64 {
    let s: f64 = scores
        .iter()
        .map(|xi| {
            let u = (x - xi) / h;
            (-0.5 * u * u).exp()
        })
        .sum();
    s * INV_SQRT_2PI / (scores.len() as f64 * h)
}

/// Density on a uniform grid of `grid` points spanning `[0, 1]`.
pub fn kde(scores: &[f64], bandwidth: Option<f64>, grid: usize) -> Result<DensityEstimate> {
    if scores.is_empty() {
        return Err(Error::EmptyDataset("kde needs at least one score".into()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("kde scores must be finite".into()));
    }
    if grid < 2 {
        return Err(Error::Contract("kde grid needs at least 2 points".into()));
    }
    let h = match bandwidth {
        Some(h) if !(h > 0.0 && h.is_finite()) => {
            return Err(Error::Contract(format!("bandwidth {h} must be positive")))
        }
        Some(h) => h,
        None => silverman_bandwidth(scores),
    };
    let sample_points: Vec<f64> = (0..grid).map(|i| i as f64 / (grid - 1) as f64).collect();
    let density = sample_points.iter().map(|&x| density_at(scores, h, x)).collect();
    Ok(DensityEstimate {
        sample_points,
        density,
        bandwidth: h,
        n: scores.len(),
    })
}
