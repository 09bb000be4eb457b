use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Bindings, ParamStore};
use crate::autodiff::{Tape, Tensor, Var};
use crate::dsp::FeatureTrack;
use crate::error::{Error, Result};
use crate::similarity::SimilarityVector;

/// Prefix shared by every similarity-conditioning tensor.
pub const COND_PREFIX: &str = "cond.";

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilmPlacement {
    /// Modulate the recurrent unit's output.
    #[default]
    PostRecurrent,
    /// Modulate the concatenated feature encodings before the recurrent unit.
    PreRecurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub mlp_layers: usize,
    /// Width of the similarity smoothing layer.
    pub cond_hidden: usize,
    pub n_classes: usize,
    pub noise_bands: usize,
    pub sinusoids: usize,
    pub frame_len: usize,
    pub film_placement: FilmPlacement,
    pub reverb_len: usize,
    /// Initial bias of the noise-magnitude head.
    pub noise_bias: f64,
    /// Initial bias of the transient-amplitude head.
    pub amp_bias: f64,
    /// Learned transposed-convolution gain on the transient buffer.
    pub upsampler: bool,
    pub upsampler_width: usize,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            mlp_layers: 3,
            cond_hidden: 64,
            n_classes: 2,
            noise_bands: 100,
            sinusoids: 128,
            frame_len: 256,
            film_placement: FilmPlacement::PostRecurrent,
            reverb_len: 22_050,
            noise_bias: -5.0,
            amp_bias: -5.0,
            upsampler: false,
            upsampler_width: 512,
            seed: 0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("mlp_layers", self.mlp_layers),
            ("cond_hidden", self.cond_hidden),
            ("n_classes", self.n_classes),
            ("sinusoids", self.sinusoids),
            ("reverb_len", self.reverb_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.noise_bands < 2 {
            return Err(Error::Config("model.noise_bands must be at least 2".into()));
        }
        if self.frame_len < 4 || self.frame_len % 2 != 0 {
            return Err(Error::Config("model.frame_len must be even and at least 4".into()));
        }
        if self.upsampler && self.upsampler_width < self.frame_len {
            return Err(Error::Config("model.upsampler_width must be at least frame_len".into()));
        }
        Ok(())
    }

    /// Upper bound of the transient frequency range `(0, f/2)`.
    pub fn max_frequency(&self) -> f64 {
        self.frame_len as f64 / 2.0
    }
    /// Width of the activation modulated by FiLM.

    pub fn film_width(&self) -> usize {
        match self.film_placement {
            FilmPlacement::PostRecurrent => self.hidden,
            FilmPlacement::PreRecurrent => 2 * self.hidden,
        }
    }
}

/// Per-frame synthesizer controls, row-major `frames × width`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthControls {
    pub frames: usize,
    /// Noise-band magnitudes `H`, `frames × noise_bands`.
    pub noise: Vec<f64>,
    /// Transient amplitudes `A`, `frames × sinusoids`.
    pub amplitudes: Vec<f64>,
    /// Transient frequencies `F`, `frames × sinusoids`, inside `(0, f/2)`.
    pub frequencies: Vec<f64>,
    /// Frame-rate transient gain envelope (upsampler only).
    pub envelope: Option<Vec<f64>>,
}

/// Decoder outputs on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ControlVars<'t> {
    pub noise: Var<'t>,
    pub amplitudes: Var<'t>,
    pub frequencies: Var<'t>,
    pub envelope: Option<Var<'t>>,
}

impl ControlVars<'_> {
    pub fn to_controls(&self) -> SynthControls {
        SynthControls {
            frames: self.noise.shape()[0],
            noise: self.noise.to_vec(),
            amplitudes: self.amplitudes.to_vec(),
            frequencies: self.frequencies.to_vec(),
            envelope: self.envelope.map(|e| e.to_vec()),
        }
    }
}

/// Decoder, conditioning stack and reverb weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub config: DecoderConfig,
    pub params: ParamStore,
}

struct Init {
    rng: ChaCha8Rng,
    params: ParamStore,
}

impl Init {
    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.uniform(&[fan_in, fan_out], bound);
        let b = self.uniform(&[fan_out], bound);
        self.params.insert(format!("{name}.w"), w);
        self.params.insert(format!("{name}.b"), b);
    }

    /// Scalar-input layer for features in `[0, 1]`: each unit crosses zero
    /// at a uniformly drawn point of that range.
    fn feature_input(&mut self, name: &str, fan_out: usize) {
        let w = self.uniform(&[1, fan_out], 1.0);
        let b: Vec<f64> = w.data().iter().map(|wj| -wj * self.rng.gen_range(0.0..1.0)).collect();
        self.params.insert(format!("{name}.w"), w);
        self.params.insert(format!("{name}.b"), Tensor::vector(b));
    }

    fn head(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: f64) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.uniform(&[fan_in, fan_out], bound);
        self.params.insert(format!("{name}.w"), w);
        self.params.insert(format!("{name}.b"), Tensor::filled(&[fan_out], bias));
    }
}

impl DecoderWeights {
    /// Seeded initialization. The FiLM generator starts at zero, so the
    /// conditioning is the identity (`γ = 1`, `β = 0`).
    pub fn init(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let h = c.hidden;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(c.seed),
            params: ParamStore::new(),
        };
        for feature in ["centroid", "loudness"] {
            init.feature_input(&format!("mlp_{feature}.0"), h);
            for l in 1..c.mlp_layers {
                init.linear(&format!("mlp_{feature}.{l}"), h, h);
            }
        }
        let bound = 1.0 / (h as f64).sqrt();
        let w_ih = init.uniform(&[2 * h, 3 * h], bound);
        let b_ih = init.uniform(&[3 * h], bound);
        let w_hh = init.uniform(&[h, 3 * h], bound);
        let b_hh = init.uniform(&[3 * h], bound);
        init.params.insert("gru.w_ih", w_ih);
        init.params.insert("gru.b_ih", b_ih);
        init.params.insert("gru.w_hh", w_hh);
        init.params.insert("gru.b_hh", b_hh);
        for l in 0..c.mlp_layers {
            init.linear(&format!("mlp_out.{l}"), if l == 0 { 3 * h } else { h }, h);
        }
        init.head("head.noise", h, c.noise_bands, c.noise_bias);
        init.head("head.amp", h, c.sinusoids, c.amp_bias);
        init.head("head.freq", h, c.sinusoids, 0.0);

        init.linear("cond.smooth", c.n_classes, c.cond_hidden);
        let fw = c.film_width();
        init.params.insert("cond.film.w", Tensor::zeros(&[c.cond_hidden, 2 * fw]));
        init.params.insert("cond.film.b", Tensor::zeros(&[2 * fw]));

        let len = c.reverb_len - 1;
        let tail: Vec<f64> = (0..len)
            .map(|t| 0.01 * init.rng.gen_range(-1.0..1.0) * (-6.0 * t as f64 / len.max(1) as f64).exp())
            .collect();
        init.params.insert("reverb.tail", Tensor::vector(tail));

        if c.upsampler {
            init.head("head.env", h, 1, 0.0);
            init.params.insert(
                "upsampler.kernel",
                Tensor::filled(&[c.upsampler_width], 1.0 / c.upsampler_width as f64 * c.frame_len as f64),
            );
        }
        Ok(Self {
            config,
            params: init.params,
        })
    }

    /// Whether `name` belongs to the similarity-conditioning stack.
    pub fn is_conditioning(name: &str) -> bool {
        name.starts_with(COND_PREFIX)
    }

    /// `(γ, β)` from a similarity vector on the tape.
    pub fn film_params<'t>(&self, b: &Bindings<'t>, similarity: Var<'t>) -> (Var<'t>, Var<'t>) {
        let n = self.config.n_classes;
        let w = self.config.film_width();
        let smooth = similarity
            .reshape(&[1, n])
            .linear(b.get("cond.smooth.w"), b.get("cond.smooth.b"))
            .tanh();
        let out = smooth
            .linear(b.get("cond.film.w"), b.get("cond.film.b"))
            .reshape(&[2 * w]);
        (out.narrow(0, w).add_scalar(1.0), out.narrow(w, w))
    }

    fn mlp<'t>(&self, b: &Bindings<'t>, prefix: &str, mut x: Var<'t>) -> Var<'t> {
        for l in 0..self.config.mlp_layers {
            x = x
                .linear(b.get(&format!("{prefix}.{l}.w")), b.get(&format!("{prefix}.{l}.b")))
                .layer_norm(LN_EPS)
                .relu();
        }
        x
    }

    /// Decoder forward pass. `centroid` and `loudness` are `[N, 1]`,
    /// `similarity` is `[n_classes]`. The output MLP sees the feature
    /// encodings alongside the recurrent output.
    pub fn forward<'t>(
        &self,
        b: &Bindings<'t>,
        centroid: Var<'t>,
        loudness: Var<'t>,
        similarity: Var<'t>,
    ) -> ControlVars<'t> {
        let c = &self.config;
        let (gamma, beta) = self.film_params(b, similarity);
        let modulate = |x: Var<'t>| x.mul_row(gamma).add_row(beta);

        let mut x = Var::concat(&[
            self.mlp(b, "mlp_centroid", centroid),
            self.mlp(b, "mlp_loudness", loudness),
        ]);
        if c.film_placement == FilmPlacement::PreRecurrent {
            x = modulate(x);
        }
        let mut r = x
            .linear(b.get("gru.w_ih"), b.get("gru.b_ih"))
            .gru(b.get("gru.w_hh"), b.get("gru.b_hh"));
        if c.film_placement == FilmPlacement::PostRecurrent {
            r = modulate(r);
        }
        let x = self.mlp(b, "mlp_out", Var::concat(&[x, r]));

        let head = |name: &str| x.linear(b.get(&format!("{name}.w")), b.get(&format!("{name}.b")));
        let frames = x.shape()[0];
        ControlVars {
            noise: head("head.noise").exp_sigmoid(),
            amplitudes: head("head.amp").exp_sigmoid(),
            frequencies: head("head.freq").sigmoid().scale(c.max_frequency()),
            envelope: c.upsampler.then(|| head("head.env").reshape(&[frames])),
        }
    }

    fn check_inputs(&self, features: &FeatureTrack, similarity: &SimilarityVector) -> Result<()> {
        if similarity.len() != self.config.n_classes {
            return Err(Error::Dimension {
                expected: self.config.n_classes,
                found: similarity.len(),
            });
        }
        if features.frames() == 0 {
            return Err(Error::Shape("feature track has no frames".into()));
        }
        Ok(())
    }
}

/// Feature-wise modulation `γ[h]·hidden[t,h] + β[h]` of a `[N, W]` hidden
/// sequence, with `(γ, β)` generated from `similarity`.
pub fn film(hidden: &Tensor, similarity: &SimilarityVector, weights: &DecoderWeights) -> Result<Tensor> {
    let w = weights.config.film_width();
    if hidden.shape().len() != 2 || hidden.shape()[1] != w {
        return Err(Error::Shape(format!(
            "hidden has shape {:?}, conditioning width is {w}",
            hidden.shape()
        )));
    }
    if similarity.len() != weights.config.n_classes {
        return Err(Error::Dimension {
            expected: weights.config.n_classes,
            found: similarity.len(),
        });
    }
    let tape = Tape::new();
    let b = weights.params.bind(&tape, |_| false);
    let s = tape.constant_vec(&[similarity.len()], similarity.channels().to_vec());
    let (gamma, beta) = weights.film_params(&b, s);
    Ok(tape.constant(hidden).mul_row(gamma).add_row(beta).to_tensor())
}

/// Plain-value decoder evaluation.
pub fn decode(features: &FeatureTrack, similarity: &SimilarityVector, weights: &DecoderWeights) -> Result<SynthControls> {
    weights.check_inputs(features, similarity)?;
    let n = features.frames();
    let tape = Tape::new();
    let b = weights.params.bind(&tape, |_| false);
    let c = tape.constant_vec(&[n, 1], features.centroid.clone());
    let l = tape.constant_vec(&[n, 1], features.loudness.clone());
    let s = tape.constant_vec(&[similarity.len()], similarity.channels().to_vec());
    Ok(weights.forward(&b, c, l, s).to_controls())
}
