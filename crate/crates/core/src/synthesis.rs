//! Differentiable signal chain: filtered-noise and inverse-DCT transient
//! synthesizers, learned reverb and the end-to-end render.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::dsp::{fft_convolve, hann_symmetric, FeatureTrack};
use crate::error::{Error, Result};
use crate::nn::{Bindings, ControlVars, DecoderConfig, DecoderWeights};
use crate::similarity::SimilarityVector;

/// Orthonormal DCT-III basis, row-major `M[k, t] = α_k cos(π (2t + 1) k / 2f)`,
/// so that `idct(c) = c · M`.
pub fn idct_matrix(f: usize) -> Vec<f64> {
    let mut m = vec![0.0; f * f];
    let a0 = (1.0 / f as f64).sqrt();
    let ak = (2.0 / f as f64).sqrt();
    for k in 0..f {
        let alpha = if k == 0 { a0 } else { ak };
        for t in 0..f {
            m[k * f + t] = alpha * (PI * (2 * t + 1) as f64 * k as f64 / (2 * f) as f64).cos();
        }
    }
    m
}

/// Orthonormal inverse DCT (type III).
pub fn idct(coefficients: &[f64]) -> Vec<f64> {
    let f = coefficients.len();
    let m = idct_matrix(f);
    (0..f)
        .map(|t| (0..f).map(|k| coefficients[k] * m[k * f + t]).sum())
        .collect()
}

/// Orthonormal DCT-II, the inverse of [`idct`].
pub fn dct(x: &[f64]) -> Vec<f64> {
    let f = x.len();
    let m = idct_matrix(f);
    (0..f)
        .map(|k| (0..f).map(|t| x[t] * m[k * f + t]).sum())
        .collect()
}

/// Linear interpolation from `bands` equally spaced band centers onto
/// `bins` frequency bins, `[bands, bins]`.
pub fn band_interpolation_matrix(bands: usize, bins: usize) -> Vec<f64> {
    let mut m = vec![0.0; bands * bins];
    let spacing = (bins - 1) as f64 / (bands - 1) as f64;
    for b in 0..bins {
        let pos = b as f64 / spacing;
        let j = (pos.floor() as usize).min(bands - 2);
        let frac = pos - j as f64;
        m[j * bins + b] += 1.0 - frac;
        m[(j + 1) * bins + b] += frac;
    }
    m
}

/// Zero-phase FIR design from a real half-spectrum: inverse real DFT,
/// circular shift to the center and a symmetric Hann window.
/// `[bins, taps]` with `bins = n/2 + 1`, `taps = n + 1`.
pub fn fir_design_matrix(n: usize) -> Vec<f64> {
    let bins = n / 2 + 1;
    let taps = n + 1;
    let center = (n / 2) as isize;
    let window = hann_symmetric(taps);
    let mut m = vec![0.0; bins * taps];
    for k in 0..bins {
        let w = if k == 0 || k == n / 2 { 1.0 } else { 2.0 };
        for (tau, win) in window.iter().enumerate() {
            let t = tau as isize - center;
            let phase = 2.0 * PI * (k as isize * t) as f64 / n as f64;
            m[k * taps + tau] = w * phase.cos() / n as f64 * win;
        }
    }
    m
}

/// Fixed operators of the synthesizers for one decoder configuration.
#[derive(Debug, Clone)]
pub struct SynthOps {
    pub frame_len: usize,
    pub noise_bands: usize,
    pub sinusoids: usize,
    /// `[bands, taps]`: band magnitudes to filter kernel.
    pub noise_kernel: Vec<f64>,
    /// `[f, f]` orthonormal inverse DCT.
    pub idct: Vec<f64>,
}

impl SynthOps {
    pub fn new(cfg: &DecoderConfig) -> Self {
        let f = cfg.frame_len;
        let bins = f / 2 + 1;
        let taps = f + 1;
        let interp = band_interpolation_matrix(cfg.noise_bands, bins);
        let fir = fir_design_matrix(f);
        let mut kernel = vec![0.0; cfg.noise_bands * taps];
        crate::autodiff::gemm(cfg.noise_bands, bins, taps, &interp, false, &fir, false, &mut kernel, 0.0);
        Self {
            frame_len: f,
            noise_bands: cfg.noise_bands,
            sinusoids: cfg.sinusoids,
            noise_kernel: kernel,
            idct: idct_matrix(f),
        }
    }

    pub fn taps(&self) -> usize {
        self.frame_len + 1
    }

    /// Filtered-noise synthesis on the tape; `h` is `[frames, bands]`.
    pub fn noise_var<'t>(&self, h: Var<'t>, seed: u64) -> Var<'t> {
        let frames = h.shape()[0];
        let k = h
            .tape()
            .constant_vec(&[self.noise_bands, self.taps()], self.noise_kernel.clone());
        let noise = Rc::new(white_noise(seed, frames * self.frame_len));
        h.matmul(k).filter_overlap_add(noise, self.frame_len)
    }

    /// Transient synthesis on the tape; `a`, `freq` are `[frames, K]`.
    pub fn transient_var<'t>(&self, a: Var<'t>, freq: Var<'t>) -> Var<'t> {
        let f = self.frame_len;
        let frames = a.shape()[0];
        let m = a.tape().constant_vec(&[f, f], self.idct.clone());
        a.sinusoid_bank(freq, f).matmul(m).reshape(&[frames * f])
    }
}

/// Seeded unit-variance white noise.
pub fn white_noise(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn check_matrix(name: &str, values: &[f64], frames: usize, width: usize) -> Result<()> {
    if values.len() != frames * width {
        return Err(Error::Shape(format!(
            "{name} has {} values, expected {frames} x {width}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{name} contains non-finite values")));
    }
    Ok(())
}

/// Filtered-noise synthesizer: band magnitudes `h` (`frames × bands`)
/// shape one block of seeded noise per frame, overlap-added with hop `f`.
pub fn noise_synth(h: &[f64], frames: usize, bands: usize, frame_len: usize, seed: u64) -> Result<Vec<f64>> {
    check_matrix("H", h, frames, bands)?;
    let cfg = DecoderConfig {
        noise_bands: bands,
        frame_len,
        ..DecoderConfig::default()
    };
    let ops = SynthOps::new(&cfg);
    let tape = Tape::new();
    let hv = tape.constant_vec(&[frames, bands], h.to_vec());
    Ok(ops.noise_var(hv, seed).to_vec())
}

/// Inverse-DCT transient synthesizer: frame `n` holds
/// `Σ_k A[n,k] · idct(sin(2π F[n,k] t / f))` at `[n f, (n + 1) f)`.
pub fn transient_synth(a: &[f64], freq: &[f64], frames: usize, sinusoids: usize, frame_len: usize) -> Result<Vec<f64>> {
    check_matrix("A", a, frames, sinusoids)?;
    check_matrix("F", freq, frames, sinusoids)?;
    let max = frame_len as f64 / 2.0;
    if let Some(v) = freq.iter().find(|v| !(**v > 0.0 && **v < max)) {
        return Err(Error::Contract(format!("frequency {v} outside (0, {max})")));
    }
    let cfg = DecoderConfig {
        sinusoids,
        frame_len,
        ..DecoderConfig::default()
    };
    let ops = SynthOps {
        noise_kernel: Vec::new(),
        ..SynthOps::new(&DecoderConfig {
            noise_bands: 2,
            ..cfg
        })
    };
    let tape = Tape::new();
    let av = tape.constant_vec(&[frames, sinusoids], a.to_vec());
    let fv = tape.constant_vec(&[frames, sinusoids], freq.to_vec());
    Ok(ops.transient_var(av, fv).to_vec())
}

/// Linear convolution with `ir`, truncated to the dry length.
pub fn apply_reverb(dry: &[f64], ir: &[f64]) -> Result<Vec<f64>> {
    if ir.is_empty() || ir.len() > dry.len() {
        return Err(Error::Contract(format!(
            "impulse response length {} must be in 1..={}",
            ir.len(),
            dry.len()
        )));
    }
    let mut y = fft_convolve(dry, ir);
    y.truncate(dry.len());
    Ok(y)
}

/// Synthesizer outputs before export, all of length `frames × f`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedAudio {
    pub dry_noise: Vec<f64>,
    pub dry_transient: Vec<f64>,
    pub wet_mix: Vec<f64>,
    pub seed: u64,
}

impl RenderedAudio {
    /// Trims to `len` samples and soft-clips with `tanh`.
    pub fn export(&self, len: usize) -> Vec<f64> {
        self.wet_mix.iter().take(len).map(|v| v.tanh()).collect()
    }
}

/// Rendered buffers on a tape.
#[derive(Debug, Clone, Copy)]
pub struct RenderVars<'t> {
    pub noise: Var<'t>,
    pub transient: Var<'t>,
    pub wet: Var<'t>,
}

/// Moves a frame-block signal `f/2` samples earlier (zero-filling the end)
/// so synthesis frame `n` is centered on sample `n f`, like analysis frames.
pub fn center_frames<'t>(x: Var<'t>, frame_len: usize) -> Var<'t> {
    let half = frame_len / 2;
    let len = x.len();
    let pad = x.tape().constant_vec(&[half], vec![0.0; half]);
    Var::concat(&[x.narrow(half, len - half), pad])
}

/// Controls to audio on the tape: reverb of noise plus transients
/// (optionally gain-shaped by the learned upsampler), frame-centered.
pub fn render_var<'t>(ops: &SynthOps, b: &Bindings<'t>, controls: &ControlVars<'t>, seed: u64) -> RenderVars<'t> {
    let noise = center_frames(ops.noise_var(controls.noise, seed), ops.frame_len);
    let mut transient = ops.transient_var(controls.amplitudes, controls.frequencies);
    if let (Some(env), Some(kernel)) = (controls.envelope, b.try_get("upsampler.kernel")) {
        let gain = env.transposed_conv1d(kernel, ops.frame_len).relu();
        transient = transient.mul(gain);
    }
    let transient = center_frames(transient, ops.frame_len);
    let wet = noise.add(transient).reverb(b.get("reverb.tail"));
    RenderVars { noise, transient, wet }
}

/// Features and similarity to audio with fixed weights.
pub fn synthesize(
    features: &FeatureTrack,
    similarity: &SimilarityVector,
    weights: &DecoderWeights,
    seed: u64,
) -> Result<RenderedAudio> {
    synthesize_with(&SynthOps::new(&weights.config), features, similarity, weights, seed)
}

/// [`synthesize`] with prebuilt operators.
pub fn synthesize_with(
    ops: &SynthOps,
    features: &FeatureTrack,
    similarity: &SimilarityVector,
    weights: &DecoderWeights,
    seed: u64,
) -> Result<RenderedAudio> {
    if similarity.len() != weights.config.n_classes {
        return Err(Error::Dimension {
            expected: weights.config.n_classes,
            found: similarity.len(),
        });
    }
    let n = features.frames();
    if n == 0 {
        return Err(Error::Shape("feature track has no frames".into()));
    }
    let tape = Tape::new();
    let b = weights.params.bind(&tape, |_| false);
    let c = tape.constant_vec(&[n, 1], features.centroid.clone());
    let l = tape.constant_vec(&[n, 1], features.loudness.clone());
    let s = tape.constant_vec(&[similarity.len()], similarity.channels().to_vec());
    let controls = weights.forward(&b, c, l, s);
    let r = render_var(ops, &b, &controls, seed);
    let out = RenderedAudio {
        dry_noise: r.noise.to_vec(),
        dry_transient: r.transient.to_vec(),
        wet_mix: r.wet.to_vec(),
        seed,
    };
    if out.wet_mix.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("synthesized audio is not finite".into()));
    }
    Ok(out)
}
