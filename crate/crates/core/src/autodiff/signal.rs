//! Fused differentiable signal operations with hand-written pullbacks.

use std::rc::Rc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::ops::sigmoid;
use super::{gemm, Var};
use crate::dsp::{centered_frame_count, fft_convolve, reflect_index, Window};
use crate::linalg;

/// Framing for [`Var::stft_mag`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftMagConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window: Window,
}

impl<'t> Var<'t> {
    /// Magnitude STFT of a 1-D signal, `[frames, fft_size / 2 + 1]`.
    ///
    /// Frames are centered on multiples of `hop` with reflection padding,
    /// matching [`crate::dsp::stft`]. The pullback treats `d|X|/dX` as 0 at
    /// `|X| = 0`.
    pub fn stft_mag(self, cfg: StftMagConfig) -> Var<'t> {
        let x = self.value();
        let len = x.len();
        let n = cfg.fft_size;
        let bins = n / 2 + 1;
        let frames = centered_frame_count(len, cfg.hop);
        let window = Rc::new(cfg.window.coefficients(n));
        let half = (n / 2) as isize;

        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(n);
        let mut spectra: Vec<Complex<f64>> = Vec::with_capacity(frames * bins);
        let mut mags = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for f in 0..frames {
            let start = (f * cfg.hop) as isize - half;
            for (t, b) in buf.iter_mut().enumerate() {
                let idx = reflect_index(start + t as isize, len);
                *b = Complex::new(x[idx] * window[t], 0.0);
            }
            fft.process(&mut buf);
            for c in &buf[..bins] {
                spectra.push(*c);
                mags.push(c.norm());
            }
        }

        let spectra = Rc::new(spectra);
        let mags_rc = Rc::new(mags.clone());
        let id = self.id;
        let hop = cfg.hop;
        self.tape
            .push(vec![frames, bins], mags, &[self], move |g, sink| {
                let mut planner = FftPlanner::<f64>::new();
                let ifft = planner.plan_fft_inverse(n);
                let mut dx = vec![0.0; len];
                let mut buf = vec![Complex::new(0.0, 0.0); n];
                for f in 0..frames {
                    buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
                    for k in 0..bins {
                        let m = mags_rc[f * bins + k];
                        if m > 0.0 {
                            buf[k] = spectra[f * bins + k] * (g[f * bins + k] / m);
                        }
                    }
                    // Re(sum_k Z_k e^{+i 2 pi k t / n}) is the cotangent of
                    // the windowed frame.
                    ifft.process(&mut buf);
                    let start = (f * hop) as isize - half;
                    for t in 0..n {
                        let idx = reflect_index(start + t as isize, len);
                        dx[idx] += buf[t].re * window[t];
                    }
                }
                sink.add_owned(id, dx);
            })
    }

    /// Per-frame filtering of fixed noise followed by overlap-add.
    ///
    /// `self` holds one zero-phase FIR kernel per row (`[frames, taps]`,
    /// odd `taps`, centered at `(taps - 1) / 2`); `noise` holds one block of
    /// `hop` samples per frame. Output length is `frames * hop`; tails past
    /// either end are discarded.
    pub fn filter_overlap_add(self, noise: Rc<Vec<f64>>, hop: usize) -> Var<'t> {
        let (frames, taps) = self.rows_cols();
        assert_eq!(noise.len(), frames * hop, "noise block size mismatch");
        let center = (taps - 1) / 2;
        let total = frames * hop;
        let k = self.value();
        let mut y = vec![0.0; total];
        for f in 0..frames {
            let kr = &k[f * taps..(f + 1) * taps];
            let nr = &noise[f * hop..(f + 1) * hop];
            let base = (f * hop) as isize - center as isize;
            for (t, &e) in nr.iter().enumerate() {
                let start = base + t as isize;
                let j0 = (-start).max(0) as usize;
                let j1 = ((total as isize - start).min(taps as isize)).max(0) as usize;
                for j in j0..j1 {
                    y[(start + j as isize) as usize] += kr[j] * e;
                }
            }
        }
        let id = self.id;
        self.tape.push(vec![total], y, &[self], move |g, sink| {
            let mut dk = vec![0.0; frames * taps];
            for f in 0..frames {
                let dr = &mut dk[f * taps..(f + 1) * taps];
                let nr = &noise[f * hop..(f + 1) * hop];
                let base = (f * hop) as isize - center as isize;
                for (t, &e) in nr.iter().enumerate() {
                    let start = base + t as isize;
                    let j0 = (-start).max(0) as usize;
                    let j1 = ((total as isize - start).min(taps as isize)).max(0) as usize;
                    for j in j0..j1 {
                        dr[j] += g[(start + j as isize) as usize] * e;
                    }
                }
            }
            sink.add_owned(id, dk);
        })
    }

    /// Convolves a 1-D signal with the impulse response `[1, tail...]`,
    /// truncated to the signal length.
    pub fn reverb(self, tail: Var<'t>) -> Var<'t> {
        let dry = self.value();
        let len = dry.len();
        let tv = tail.value();
        let ir: Rc<Vec<f64>> = Rc::new(std::iter::once(1.0).chain(tv.iter().copied()).collect());
        let mut y = fft_convolve(&dry, &ir);
        y.truncate(len);
        let (id_dry, id_tail) = (self.id, tail.id);
        let m = ir.len();
        self.tape.push(vec![len], y, &[self, tail], move |g, sink| {
            if sink.wants(id_dry) {
                let rev: Vec<f64> = ir.iter().rev().copied().collect();
                let c = fft_convolve(g, &rev);
                sink.add_owned(id_dry, c[m - 1..m - 1 + len].to_vec());
            }
            if sink.wants(id_tail) {
                let rev: Vec<f64> = dry.iter().rev().copied().collect();
                let c = fft_convolve(g, &rev);
                // d ir[j] = sum_i g[i + j] dry[i] = c[j + len - 1]
                let d: Vec<f64> = (1..m)
                    .map(|j| c.get(j + len - 1).copied().unwrap_or(0.0))
                    .collect();
                sink.add_owned(id_tail, d);
            }
        })
    }

    /// Per-frame sums of sinusoids: `out[n, t] = sum_k A[n,k] sin(2 pi F[n,k] t / f)`.
    ///
    /// `self` is the amplitude matrix, `freqs` the frequency matrix (both
    /// `[frames, K]`); the result is `[frames, frame_len]`.
    pub fn sinusoid_bank(self, freqs: Var<'t>, frame_len: usize) -> Var<'t> {
        let (frames, k) = self.rows_cols();
        assert_eq!(freqs.rows_cols(), (frames, k), "sinusoid_bank: shape mismatch");
        let a = self.value();
        let fr = freqs.value();
        let mut y = vec![0.0; frames * frame_len];
        let tau = 2.0 * std::f64::consts::PI / frame_len as f64;
        for n in 0..frames {
            let out = &mut y[n * frame_len..(n + 1) * frame_len];
            for j in 0..k {
                let amp = a[n * k + j];
                if amp == 0.0 {
                    continue;
                }
                let (s1, c1) = (tau * fr[n * k + j]).sin_cos();
                let (mut s, mut c) = (0.0f64, 1.0f64);
                for o in out.iter_mut() {
                    *o += amp * s;
                    let ns = s * c1 + c * s1;
                    c = c * c1 - s * s1;
                    s = ns;
                }
            }
        }
        let (ia, iff) = (self.id, freqs.id);
        self.tape
            .push(vec![frames, frame_len], y, &[self, freqs], move |g, sink| {
                let want_a = sink.wants(ia);
                let want_f = sink.wants(iff);
                let mut da = vec![0.0; frames * k];
                let mut df = vec![0.0; frames * k];
                for n in 0..frames {
                    let gr = &g[n * frame_len..(n + 1) * frame_len];
                    for j in 0..k {
                        let (s1, c1) = (tau * fr[n * k + j]).sin_cos();
                        let (mut s, mut c) = (0.0f64, 1.0f64);
                        let (mut acc_s, mut acc_c) = (0.0, 0.0);
                        for (t, gv) in gr.iter().enumerate() {
                            acc_s += gv * s;
                            acc_c += gv * c * t as f64;
                            let ns = s * c1 + c * s1;
                            c = c * c1 - s * s1;
                            s = ns;
                        }
                        da[n * k + j] = acc_s;
                        df[n * k + j] = acc_c * tau * a[n * k + j];
                    }
                }
                if want_a {
                    sink.add_owned(ia, da);
                }
                if want_f {
                    sink.add_owned(iff, df);
                }
            })
    }

    /// Transposed 1-D convolution of a frame-rate envelope (`[frames]`)
    /// with a kernel (`[width]`) at the given stride. Each frame's kernel is
    /// centered on its block; output is trimmed to `frames * stride`.
    pub fn transposed_conv1d(self, kernel: Var<'t>, stride: usize) -> Var<'t> {
        let e = self.value();
        let w = kernel.value();
        let frames = e.len();
        let width = w.len();
        let total = frames * stride;
        let offset = (width as isize - stride as isize) / 2;
        let pos = move |n: usize, j: usize| -> Option<usize> {
            let p = (n * stride) as isize - offset + j as isize;
            (p >= 0 && (p as usize) < total).then_some(p as usize)
        };
        let mut y = vec![0.0; total];
        for n in 0..frames {
            for j in 0..width {
                if let Some(p) = pos(n, j) {
                    y[p] += e[n] * w[j];
                }
            }
        }
        let (ie, iw) = (self.id, kernel.id);
        self.tape.push(vec![total], y, &[self, kernel], move |g, sink| {
            let mut de = vec![0.0; frames];
            let mut dw = vec![0.0; width];
            for n in 0..frames {
                for j in 0..width {
                    if let Some(p) = pos(n, j) {
                        de[n] += g[p] * w[j];
                        dw[j] += g[p] * e[n];
                    }
                }
            }
            sink.add_owned(ie, de);
            sink.add_owned(iw, dw);
        })
    }

    /// `sqrt((x - mu)ᵀ Σ⁻¹ (x - mu))` for a 1-D `x`, with `Σ = L Lᵀ` given
    /// by its row-major lower Cholesky factor. The pullback at `x = mu`
    /// is 0.
    pub fn mahalanobis(self, mu: &[f64], chol: &[f64]) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.len(), mu.len(), "mahalanobis: dimension mismatch");
        let diff: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
        let y = linalg::solve_lower(chol, &diff);
        let md = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let z = linalg::solve_lower_transpose(chol, &y);
        let id = self.id;
        self.tape.push(vec![], vec![md], &[self], move |g, sink| {
            if md > 0.0 {
                sink.add_owned(id, z.iter().map(|v| g[0] * v / md).collect());
            }
        })
    }

    /// Gated recurrent unit over a sequence with zero initial state.
    ///
    /// `self` holds precomputed input projections `x W_ih + b_ih`
    /// (`[steps, 3H]`, gate order r, z, n); `w_hh` is `[H, 3H]`, `b_hh`
    /// is `[3H]`. Returns hidden states `[steps, H]`.
    pub fn gru(self, w_hh: Var<'t>, b_hh: Var<'t>) -> Var<'t> {
        let (steps, h3) = self.rows_cols();
        let h = h3 / 3;
        assert_eq!(w_hh.rows_cols(), (h, h3), "gru: recurrent weight shape");
        assert_eq!(b_hh.len(), h3, "gru: recurrent bias shape");
        let gi = self.value();
        let w = w_hh.value();
        let b = b_hh.value();

        let mut hs = vec![0.0; steps * h];
        // cached per step: r, z, n, hidden projection of the candidate
        let mut cache = vec![0.0; steps * 4 * h];
        let mut prev = vec![0.0; h];
        let mut gh = vec![0.0; h3];
        for t in 0..steps {
            gh.copy_from_slice(&b);
            gemm(1, h, h3, &prev, false, &w, false, &mut gh, 1.0);
            let gx = &gi[t * h3..(t + 1) * h3];
            let c = &mut cache[t * 4 * h..(t + 1) * 4 * h];
            for u in 0..h {
                let r = sigmoid(gx[u] + gh[u]);
                let z = sigmoid(gx[h + u] + gh[h + u]);
                let cand = (gx[2 * h + u] + r * gh[2 * h + u]).tanh();
                c[u] = r;
                c[h + u] = z;
                c[2 * h + u] = cand;
                c[3 * h + u] = gh[2 * h + u];
                hs[t * h + u] = (1.0 - z) * cand + z * prev[u];
            }
            prev.copy_from_slice(&hs[t * h..(t + 1) * h]);
        }

        let hs_rc = Rc::new(hs.clone());
        let (ig, iw, ib) = (self.id, w_hh.id, b_hh.id);
        self.tape
            .push(vec![steps, h], hs, &[self, w_hh, b_hh], move |g, sink| {
                let mut dgi = vec![0.0; steps * h3];
                let mut dw = vec![0.0; h * h3];
                let mut db = vec![0.0; h3];
                let mut dh_next = vec![0.0; h];
                let mut dgh = vec![0.0; h3];
                let zeros = vec![0.0; h];
                for t in (0..steps).rev() {
                    let c = &cache[t * 4 * h..(t + 1) * 4 * h];
                    let hp: &[f64] = if t == 0 {
                        &zeros
                    } else {
                        &hs_rc[(t - 1) * h..t * h]
                    };
                    let dgx = &mut dgi[t * h3..(t + 1) * h3];
                    let mut dh_prev = vec![0.0; h];
                    for u in 0..h {
                        let (r, z, cand, ghn) = (c[u], c[h + u], c[2 * h + u], c[3 * h + u]);
                        let dh = g[t * h + u] + dh_next[u];
                        let dcand = dh * (1.0 - z);
                        let dz = dh * (hp[u] - cand);
                        dh_prev[u] = dh * z;
                        let dan = dcand * (1.0 - cand * cand);
                        let dr = dan * ghn;
                        let daz = dz * z * (1.0 - z);
                        let dar = dr * r * (1.0 - r);
                        dgx[u] = dar;
                        dgx[h + u] = daz;
                        dgx[2 * h + u] = dan;
                        dgh[u] = dar;
                        dgh[h + u] = daz;
                        dgh[2 * h + u] = dan * r;
                    }
                    // dW += hpᵀ dgh ; dh_prev += dgh Wᵀ
                    gemm(h, 1, h3, hp, true, &dgh, false, &mut dw, 1.0);
                    for (a, v) in db.iter_mut().zip(&dgh) {
                        *a += v;
                    }
                    gemm(1, h3, h, &dgh, false, &w, true, &mut dh_prev, 1.0);
                    dh_next = dh_prev;
                }
                sink.add_owned(ig, dgi);
                sink.add_owned(iw, dw);
                sink.add_owned(ib, db);
            })
    }
}

/// One GRU step written out directly, used to cross-check [`Var::gru`].
///
/// `x_proj` is `x W_ih + b_ih` (`[3H]`), `w_hh` is `[H, 3H]` row-major.
pub fn gru_step_reference(x_proj: &[f64], h_prev: &[f64], w_hh: &[f64], b_hh: &[f64]) -> Vec<f64> {
    let h = h_prev.len();
    let h3 = 3 * h;
    let gh: Vec<f64> = (0..h3)
        .map(|j| b_hh[j] + (0..h).map(|i| h_prev[i] * w_hh[i * h3 + j]).sum::<f64>())
        .collect();
    (0..h)
        .map(|u| {
            let r = sigmoid(x_proj[u] + gh[u]);
            let z = sigmoid(x_proj[h + u] + gh[h + u]);
            let n = (x_proj[2 * h + u] + r * gh[2 * h + u]).tanh();
            (1.0 - z) * n + z * h_prev[u]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::testing::{check_gradients, random_tensor};
    use super::super::{Tape, Tensor};
    use super::*;

    const TOL: f64 = 1e-4;

    #[test]
    fn gru_gradients() {
        let gi = random_tensor(&[5, 9], 1, 1.0);
        let w = random_tensor(&[3, 9], 2, 0.8);
        let b = random_tensor(&[9], 3, 0.5);
        let probe = random_tensor(&[5, 3], 4, 1.0);
        let err = check_gradients(&[gi, w, b, probe], 1e-5, |_, v| {
            v[0].gru(v[1], v[2]).mul(v[3]).sum()
        });
        assert!(err < TOL, "err {err}");
    }

    #[test]
    fn gru_single_step_matches_reference() {
        let gi = random_tensor(&[1, 12], 5, 1.0);
        let w = random_tensor(&[4, 12], 6, 1.0);
        let b = random_tensor(&[12], 7, 1.0);
        let tape = Tape::new();
        let out = tape
            .constant(&gi)
            .gru(tape.constant(&w), tape.constant(&b))
            .to_vec();
        let expect = gru_step_reference(gi.data(), &[0.0; 4], w.data(), b.data());
        for (a, e) in out.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn gru_sequence_matches_repeated_reference_steps() {
        let gi = random_tensor(&[6, 6], 8, 1.0);
        let w = random_tensor(&[2, 6], 9, 1.0);
        let b = random_tensor(&[6], 10, 1.0);
        let tape = Tape::new();
        let out = tape
            .constant(&gi)
            .gru(tape.constant(&w), tape.constant(&b))
            .to_vec();
        let mut h = vec![0.0; 2];
        for t in 0..6 {
            h = gru_step_reference(&gi.data()[t * 6..(t + 1) * 6], &h, w.data(), b.data());
            assert!((out[t * 2] - h[0]).abs() < 1e-13);
            assert!((out[t * 2 + 1] - h[1]).abs() < 1e-13);
        }
    }

    #[test]
    fn stft_mag_gradients() {
        let x = random_tensor(&[40], 11, 1.0);
        let probe = random_tensor(&[10, 9], 12, 1.0);
        let cfg = StftMagConfig {
            fft_size: 16,
            hop: 4,
            window: Window::Hann,
        };
        let err = check_gradients(&[x, probe], 1e-6, |_, v| v[0].stft_mag(cfg).mul(v[1]).sum());
        assert!(err < TOL, "err {err}");
    }

    #[test]
    fn filter_overlap_add_gradients() {
        let k = random_tensor(&[3, 7], 13, 1.0);
        let probe = random_tensor(&[24], 14, 1.0);
        let noise = Rc::new(random_tensor(&[24], 15, 1.0).into_data());
        let err = check_gradients(&[k, probe], 1e-5, |_, v| {
            v[0].filter_overlap_add(noise.clone(), 8).mul(v[1]).sum()
        });
        assert!(err < TOL, "err {err}");
    }

    #[test]
    fn reverb_gradients() {
        let dry = random_tensor(&[20], 16, 1.0);
        let tail = random_tensor(&[6], 17, 0.5);
        let probe = random_tensor(&[20], 18, 1.0);
        let err = check_gradients(&[dry, tail, probe], 1e-5, |_, v| {
            v[0].reverb(v[1]).mul(v[2]).sum()
        });
        assert!(err < TOL, "err {err}");
    }

    #[test]
    fn sinusoid_bank_gradients() {
        let a = random_tensor(&[2, 3], 19, 1.0);
        let f = Tensor::new(vec![2, 3], vec![3.3, 10.1, 20.7, 1.2, 5.5, 7.9]).unwrap();
        let probe = random_tensor(&[2, 16], 20, 1.0);
        let err = check_gradients(&[a, f, probe], 1e-6, |_, v| {
            v[0].sinusoid_bank(v[1], 16).mul(v[2]).sum()
        });
        assert!(err < TOL, "err {err}");
    }

    #[test]
    fn sinusoid_bank_matches_direct_sine() {
        let tape = Tape::new();
        let a = tape.constant(&Tensor::new(vec![1, 2], vec![0.7, -1.3]).unwrap());
        let f = tape.constant(&Tensor::new(vec![1, 2], vec![12.25, 100.9]).unwrap());
        let y = a.sinusoid_bank(f, 256).to_vec();
        for (t, v) in y.iter().enumerate() {
            let tt = t as f64 / 256.0;
            let e = 0.7 * (2.0 * std::f64::consts::PI * 12.25 * tt).sin()
                - 1.3 * (2.0 * std::f64::consts::PI * 100.9 * tt).sin();
            assert!((v - e).abs() < 1e-11, "t {t}: {v} vs {e}");
        }
    }

    #[test]
    fn transposed_conv_gradients() {
        let e = random_tensor(&[4], 21, 1.0);
        let w = random_tensor(&[8], 22, 1.0);
        let probe = random_tensor(&[16], 23, 1.0);
        let err = check_gradients(&[e, w, probe], 1e-5, |_, v| {
            v[0].transposed_conv1d(v[1], 4).mul(v[2]).sum()
        });
        assert!(err < TOL, "err {err}");
    }

    #[test]
    fn mahalanobis_gradient() {
        let sigma = [2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 0.9];
        let chol = linalg::cholesky(&sigma, 3).unwrap();
        let mu = [0.1, -0.4, 0.2];
        let x = random_tensor(&[3], 24, 2.0);
        let err = check_gradients(&[x], 1e-6, |_, v| v[0].mahalanobis(&mu, &chol));
        assert!(err < TOL, "err {err}");
    }
}
