//! Losses plus the reconstruction-training and similarity fine-tuning loops.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::audio_io::AudioClip;
use crate::autodiff::{StftMagConfig, Tape, Tensor, Var};
use crate::config::{FinetuneConfig, TrainConfig};
use crate::dsp::{extract_features, extract_peak_sparse, FeatureTrack, PeakConfig, SparsePeakWaveform, Window};
use crate::error::{Error, Result};
use crate::nn::{adam_step, lr_at_epoch, sum_gradients, Checkpoint, DecoderWeights, LossRecord};
use crate::similarity::{BuiltinEmbedder, ClassStatsSet, Embedding, SimilarityVector, StatsSource};
use crate::synthesis::{render_var, SynthOps};

const LOG_EPS: f64 = 1e-7;

/// Multi-scale spectral loss on the tape. `target` is treated as constant.
pub fn multiscale_stft_loss_var<'t>(target: Var<'t>, estimate: Var<'t>, scales: &[usize]) -> Var<'t> {
    let tape = estimate.tape();
    let mut total = tape.scalar_constant(0.0);
    for &n in scales {
        let cfg = StftMagConfig {
            fft_size: n,
            hop: (n / 4).max(1),
            window: Window::Hann,
        };
        let s = target.stft_mag(cfg);
        let sh = estimate.stft_mag(cfg);
        let lin = s.sub(sh).abs().mean();
        let log = s.add_scalar(LOG_EPS).ln().sub(sh.add_scalar(LOG_EPS).ln()).abs().mean();
        total = total.add(lin).add(log);
    }
    total
}

/// `Σ_scales mean|S(x) − S(x̂)| + mean|log(S(x) + ε) − log(S(x̂) + ε)|`.
pub fn multiscale_stft_loss(x: &[f64], x_hat: &[f64], scales: &[usize]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            found: x_hat.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::Shape("empty signal".into()));
    }
    let tape = Tape::new();
    let a = tape.constant_vec(&[x.len()], x.to_vec());
    let b = tape.constant_vec(&[x.len()], x_hat.to_vec());
    Ok(multiscale_stft_loss_var(a, b, scales).item())
}

/// Mean squared error against the sparse peak waveform, on the tape.
pub fn transient_loss_var<'t>(transient: Var<'t>, target: &[f64]) -> Var<'t> {
    let t = transient.tape().constant_vec(&[target.len()], target.to_vec());
    transient.sub(t).square().mean()
}

pub fn transient_loss(transient: &[f64], x_s: &SparsePeakWaveform) -> Result<f64> {
    if transient.len() != x_s.samples.len() {
        return Err(Error::Dimension {
            expected: x_s.samples.len(),
            found: transient.len(),
        });
    }
    let sum: f64 = transient
        .iter()
        .zip(&x_s.samples)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / transient.len() as f64)
}

/// `Σ_j (s_j − ŝ_j)² + |s_j − ŝ_j|` for one batch element.
pub fn similarity_loss_var<'t>(target: &[f64], measured: Var<'t>) -> Var<'t> {
    let s = measured.tape().constant_vec(&[target.len()], target.to_vec());
    let r = s.sub(measured);
    r.square().sum().add(r.abs().sum())
}

/// Batch-mean L2 + L1 residual between requested and measured scores.
pub fn similarity_loss(targets: &[Vec<f64>], measured: &[Vec<f64>]) -> Result<f64> {
    if targets.len() != measured.len() || targets.is_empty() {
        return Err(Error::Dimension {
            expected: targets.len(),
            found: measured.len(),
        });
    }
    let mut total = 0.0;
    for (s, m) in targets.iter().zip(measured) {
        if s.len() != m.len() {
            return Err(Error::Dimension {
                expected: s.len(),
                found: m.len(),
            });
        }
        total += s.iter().zip(m).map(|(a, b)| (a - b).powi(2) + (a - b).abs()).sum::<f64>();
    }
    Ok(total / targets.len() as f64)
}

/// One prepared training clip.
#[derive(Debug)]
pub struct TrainingClip {
    pub clip: AudioClip,
    pub class: String,
    pub features: FeatureTrack,
    pub similarity: SimilarityVector,
    x_s: OnceLock<Vec<f64>>,
}

impl TrainingClip {
    pub fn new(clip: AudioClip, class: impl Into<String>, features: FeatureTrack, similarity: SimilarityVector) -> Self {
        Self {
            clip,
            class: class.into(),
            features,
            similarity,
            x_s: OnceLock::new(),
        }
    }
}

/// Training split with per-clip conditioning; sparse peak targets are
/// computed on first use.
#[derive(Debug)]
pub struct TrainingSet {
    clips: Vec<TrainingClip>,
    peak: PeakConfig,
    x_s_reads: AtomicUsize,
}

impl TrainingSet {
    pub fn new(clips: Vec<TrainingClip>, peak: PeakConfig) -> Self {
        Self {
            clips,
            peak,
            x_s_reads: AtomicUsize::new(0),
        }
    }

    /// Extracts features and similarity vectors for `(clip, class)` pairs.
    /// External stats need an embedding per clip id.
    pub fn prepare(
        clips: Vec<(AudioClip, String)>,
        stats: &ClassStatsSet,
        external: Option<&BTreeMap<String, Embedding>>,
        frame_len: usize,
    ) -> Result<Self> {
        let embedder = match &stats.source {
            StatsSource::Builtin { embedder } => Some(BuiltinEmbedder::new(*embedder)?),
            StatsSource::External { .. } => None,
        };
        let prepared = clips
            .into_par_iter()
            .map(|(clip, class)| {
                let features = extract_features(&clip, frame_len, frame_len)?;
                let vector = match &embedder {
                    Some(e) => e.embed(&clip)?.vector,
                    None => external
                        .and_then(|m| m.get(clip.id()))
                        .map(|e| e.vector.clone())
                        .ok_or_else(|| Error::MissingEmbedding(clip.id().to_string()))?,
                };
                let similarity = stats.score(&vector)?;
                Ok(TrainingClip::new(clip, class, features, similarity))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(
            prepared,
            PeakConfig {
                frame_len,
                ..PeakConfig::default()
            },
        ))
    }

    pub fn clips(&self) -> &[TrainingClip] {
        &self.clips
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Sparse peak waveform of clip `i`.
    pub fn x_s(&self, i: usize) -> Result<&[f64]> {
        self.x_s_reads.fetch_add(1, Ordering::Relaxed);
        let c = &self.clips[i];
        if let Some(v) = c.x_s.get() {
            return Ok(v);
        }
        let v = extract_peak_sparse(&c.clip, &self.peak)?.samples;
        Ok(c.x_s.get_or_init(|| v))
    }

    /// Number of sparse-target lookups so far.
    pub fn x_s_reads(&self) -> usize {
        self.x_s_reads.load(Ordering::Relaxed)
    }
}

/// Per-element seed for noise and sampling.
fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64, 0)));
    order
}

fn feature_vars<'t>(tape: &'t Tape, f: &FeatureTrack) -> (Var<'t>, Var<'t>) {
    let n = f.frames();
    (
        tape.constant_vec(&[n, 1], f.centroid.clone()),
        tape.constant_vec(&[n, 1], f.loudness.clone()),
    )
}

fn mean_gradients(parts: &[BTreeMap<String, Tensor>]) -> BTreeMap<String, Tensor> {
    let scale = 1.0 / parts.len() as f64;
    let mut g = sum_gradients(parts);
    for t in g.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    g
}

struct ReconStep {
    grads: BTreeMap<String, Tensor>,
    recon: f64,
    transient: f64,
}

fn recon_step(
    weights: &DecoderWeights,
    ops: &SynthOps,
    set: &TrainingSet,
    index: usize,
    cfg: &TrainConfig,
    noise_seed: u64,
) -> Result<ReconStep> {
    let item = &set.clips[index];
    let len = item.clip.len();
    let tape = Tape::new();
    let b = weights.params.bind(&tape, |_| true);
    let (c, l) = feature_vars(&tape, &item.features);
    let s = tape.constant_vec(&[item.similarity.len()], item.similarity.channels().to_vec());
    let controls = weights.forward(&b, c, l, s);
    let r = render_var(ops, &b, &controls, noise_seed);
    if r.wet.len() < len {
        return Err(Error::Shape(format!(
            "render has {} samples, clip has {len}",
            r.wet.len()
        )));
    }
    let target = tape.constant_vec(&[len], item.clip.samples().to_vec());
    let recon = multiscale_stft_loss_var(target, r.wet.narrow(0, len), &cfg.stft_scales);
    let mut total = recon;
    let mut transient = 0.0;
    if cfg.transient_loss_weight > 0.0 {
        let t = transient_loss_var(r.transient.narrow(0, len), set.x_s(index)?);
        transient = t.item();
        total = total.add(t.scale(cfg.transient_loss_weight));
    }
    let grads = tape.gradients(total)?;
    Ok(ReconStep {
        grads: b.collect(&grads),
        recon: recon.item(),
        transient,
    })
}

/// Reconstruction training. Appends one [`LossRecord`] per epoch to the
/// checkpoint history and calls `on_epoch` after each.
pub fn train_with(
    mut ckpt: Checkpoint,
    set: &TrainingSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&LossRecord),
) -> Result<Checkpoint> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::EmptyDataset("training split has no clips".into()));
    }
    let n_classes = ckpt.weights.config.n_classes;
    if let Some(c) = set.clips.iter().find(|c| c.similarity.len() != n_classes) {
        return Err(Error::Dimension {
            expected: n_classes,
            found: c.similarity.len(),
        });
    }
    let ops = SynthOps::new(&ckpt.weights.config);
    let adam_cfg = ckpt.meta.adam;
    let start = ckpt.meta.epoch;
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg.epochs, cfg.lr, cfg.lr_decay_point, cfg.lr_final);
        let order = shuffled(set.len(), cfg.seed, start + epoch);
        let (mut recon_sum, mut trans_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let weights = &ckpt.weights;
            let steps: Vec<ReconStep> = batch
                .par_iter()
                .map(|&i| recon_step(weights, &ops, set, i, cfg, mix_seed(cfg.seed, (start + epoch) as u64, i as u64 + 1)))
                .collect::<Result<_>>()?;
            for s in &steps {
                recon_sum += s.recon;
                trans_sum += s.transient;
            }
            let parts: Vec<_> = steps.into_iter().map(|s| s.grads).collect();
            adam_step(&mut ckpt.weights.params, &mean_gradients(&parts), &mut ckpt.adam, lr, adam_cfg)?;
        }
        let n = set.len() as f64;
        let record = LossRecord {
            epoch: start + epoch,
            recon_loss: recon_sum / n,
            transient_loss: trans_sum / n,
            lr,
        };
        if !(record.recon_loss.is_finite() && record.transient_loss.is_finite()) {
            return Err(Error::Numeric(format!("loss diverged at epoch {}", record.epoch)));
        }
        on_epoch(&record);
        ckpt.meta.loss_history.push(record);
    }
    ckpt.meta.epoch = start + cfg.epochs;
    ckpt.meta.train = Some(cfg.clone());
    Ok(ckpt)
}

pub fn train(ckpt: Checkpoint, set: &TrainingSet, cfg: &TrainConfig) -> Result<Checkpoint> {
    train_with(ckpt, set, cfg, |_| {})
}

/// Total loss of one record, `recon + λ·transient`.
pub fn total_loss(record: &LossRecord, weight: f64) -> f64 {
    record.recon_loss + weight * record.transient_loss
}

/// Measured normalized similarity of a rendered buffer on the tape:
/// smooth clamp plus a `leak` slope outside `[0, 1]`.
pub fn measure_similarity_var<'t>(
    audio: Var<'t>,
    embedder: &BuiltinEmbedder,
    stats: &ClassStatsSet,
    clamp_width: f64,
    leak: f64,
) -> Var<'t> {
    let e = embedder.embed_var(audio);
    let parts: Vec<Var<'t>> = stats
        .classes
        .iter()
        .map(|c| {
            let md = e.mahalanobis(&c.mu, c.cholesky());
            let clamped = c.normalize_smooth(md, clamp_width);
            let out = if leak > 0.0 && c.md_max > c.md_min {
                let u = md.add_scalar(-c.md_min).scale(1.0 / (c.md_max - c.md_min));
                clamped.add(u.sub(clamped).scale(leak))
            } else {
                clamped
            };
            out.reshape(&[1])
        })
        .collect();
    Var::concat(&parts)
}

struct FinetuneStep {
    grads: BTreeMap<String, Tensor>,
    loss: f64,
}

#[allow(clippy::too_many_arguments)]
fn finetune_step(
    weights: &DecoderWeights,
    ops: &SynthOps,
    item: &TrainingClip,
    embedder: &BuiltinEmbedder,
    stats: &ClassStatsSet,
    target: &[f64],
    cfg: &FinetuneConfig,
    noise_seed: u64,
) -> Result<FinetuneStep> {
    let len = item.clip.len();
    let tape = Tape::new();
    let b = weights.params.bind(&tape, DecoderWeights::is_conditioning);
    let (c, l) = feature_vars(&tape, &item.features);
    let s = tape.constant_vec(&[target.len()], target.to_vec());
    let controls = weights.forward(&b, c, l, s);
    let r = render_var(ops, &b, &controls, noise_seed);
    let measured = measure_similarity_var(r.wet.narrow(0, len), embedder, stats, cfg.clamp_width, cfg.clamp_leak);
    let loss = similarity_loss_var(target, measured);
    let grads = b.collect(&tape.gradients(loss)?);
    let frozen: f64 = grads
        .iter()
        .filter(|(k, _)| !DecoderWeights::is_conditioning(k))
        .map(|(_, g)| g.norm())
        .sum();
    if frozen != 0.0 {
        return Err(Error::Contract(format!("frozen tensors received gradient norm {frozen}")));
    }
    Ok(FinetuneStep {
        grads: grads
            .into_iter()
            .filter(|(k, _)| DecoderWeights::is_conditioning(k))
            .collect(),
        loss: loss.item(),
    })
}

/// Fine-tunes only the similarity-conditioning tensors so that measured
/// similarity of the output follows uniformly sampled pseudo-scores.
pub fn finetune_with(
    mut ckpt: Checkpoint,
    set: &TrainingSet,
    stats: &ClassStatsSet,
    cfg: &FinetuneConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Checkpoint> {
    cfg.validate()?;
    let embedder = match &stats.source {
        StatsSource::Builtin { embedder } => BuiltinEmbedder::new(*embedder)?,
        StatsSource::External { .. } => {
            return Err(Error::MissingStats(
                "fine-tuning needs statistics from the built-in embedder".into(),
            ))
        }
    };
    let n = ckpt.weights.config.n_classes;
    if stats.len() != n {
        return Err(Error::MissingStats(format!(
            "model has {n} classes, statistics cover {}",
            stats.len()
        )));
    }
    if set.is_empty() {
        return Err(Error::EmptyDataset("training split has no clips".into()));
    }
    let ops = SynthOps::new(&ckpt.weights.config);
    let adam_cfg = ckpt.meta.adam;
    let mut adam = crate::nn::AdamState::default();
    let start = ckpt.meta.finetune_epochs;
    for epoch in 0..cfg.epochs {
        let e = (start + epoch) as u64;
        let order = shuffled(set.len(), cfg.seed, start + epoch);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let targets: Vec<Vec<f64>> = batch
                .iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ 0xf1_7e, e, i as u64));
                    (0..n).map(|_| rng.gen::<f64>()).collect()
                })
                .collect();
            let weights = &ckpt.weights;
            let steps: Vec<FinetuneStep> = batch
                .par_iter()
                .zip(&targets)
                .map(|(&i, s)| {
                    finetune_step(weights, &ops, &set.clips[i], &embedder, stats, s, cfg, mix_seed(cfg.seed, e, i as u64 + 1))
                })
                .collect::<Result<_>>()?;
            loss_sum += steps.iter().map(|s| s.loss).sum::<f64>();
            let parts: Vec<_> = steps.into_iter().map(|s| s.grads).collect();
            adam_step(&mut ckpt.weights.params, &mean_gradients(&parts), &mut adam, cfg.lr, adam_cfg)?;
        }
        let loss = loss_sum / set.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("fine-tune loss diverged at epoch {}", start + epoch)));
        }
        on_epoch(start + epoch, loss);
        ckpt.meta.finetune_history.push((start + epoch, loss));
    }
    ckpt.meta.finetune_epochs = start + cfg.epochs;
    ckpt.meta.finetune = Some(cfg.clone());
    Ok(ckpt)
}

pub fn finetune(ckpt: Checkpoint, set: &TrainingSet, stats: &ClassStatsSet, cfg: &FinetuneConfig) -> Result<Checkpoint> {
    finetune_with(ckpt, set, stats, cfg, |_, _| {})
}

/// Line-delimited `epoch<TAB>recon_loss<TAB>transient_loss<TAB>lr` records.
pub fn loss_history_text(history: &[LossRecord]) -> String {
    let mut out = String::from("epoch\trecon_loss\ttransient_loss\tlr\n");
    for r in history {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.epoch, r.recon_loss, r.transient_loss, r.lr));
    }
    out
}

/// 50-epoch trailing moving average.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::testing::{check_gradients, random_tensor};
    use crate::config::DataConfig;
    use crate::nn::DecoderConfig;
    use crate::similarity::{ClassStats, EmbedderConfig};

    #[test]
    fn stft_loss_basics() {
        let x: Vec<f64> = (0..512).map(|i| (i as f64 * 0.07).sin()).collect();
        let y: Vec<f64> = (0..512).map(|i| (i as f64 * 0.11).cos() * 0.3).collect();
        let scales = crate::config::DEFAULT_STFT_SCALES[2..].to_vec();
        assert_eq!(multiscale_stft_loss(&x, &x, &scales).unwrap(), 0.0);
        let a = multiscale_stft_loss(&x, &y, &scales).unwrap();
        let b = multiscale_stft_loss(&y, &x, &scales).unwrap();
        assert!(a > 0.0);
        assert!((a - b).abs() < 1e-12);
        assert!(multiscale_stft_loss(&x, &y[..10], &scales).is_err());
    }

    #[test]
    fn stft_loss_gradient() {
        let scales = [32usize, 16, 8];
        let target = random_tensor(&[64], 3, 1.0);
        let x0 = random_tensor(&[64], 4, 1.0);
        let worst = check_gradients(&[x0], 1e-6, |tape, v| {
            multiscale_stft_loss_var(tape.constant(&target), v[0], &scales)
        });
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn transient_loss_oracle() {
        let target = SparsePeakWaveform {
            samples: vec![0.5, 0.0, -1.0, 0.0],
            peak_frames: vec![0],
            frame_len: 4,
        };
        assert_eq!(transient_loss(&[0.0; 4], &target).unwrap(), 1.25 / 4.0);
        assert_eq!(transient_loss(&target.samples.clone(), &target).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tgt = SparsePeakWaveform {
            samples: b.clone(),
            peak_frames: vec![],
            frame_len: 4,
        };
        let mut direct = 0.0;
        for i in 0..100 {
            direct += (a[i] - b[i]) * (a[i] - b[i]);
        }
        assert!((transient_loss(&a, &tgt).unwrap() - direct / 100.0).abs() < 1e-12);
        let tape = Tape::new();
        let av = tape.constant_vec(&[100], a.clone());
        assert!((transient_loss_var(av, &b).item() - direct / 100.0).abs() < 1e-12);
        assert!(transient_loss(&a[..3], &tgt).is_err());
    }

    #[test]
    fn similarity_loss_arithmetic() {
        assert!((similarity_loss(&[vec![0.5]], &[vec![0.25]]).unwrap() - 0.3125).abs() < 1e-15);
        assert_eq!(similarity_loss(&[vec![0.1, 0.9]], &[vec![0.1, 0.9]]).unwrap(), 0.0);
        let tape = Tape::new();
        let m = tape.constant_vec(&[1], vec![0.25]);
        assert!((similarity_loss_var(&[0.5], m).item() - 0.3125).abs() < 1e-15);
    }

    #[test]
    fn moving_average_window() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(moving_average(&v, 2), vec![1.0, 1.5, 2.5, 3.5]);
    }

    pub(crate) fn tiny_decoder() -> DecoderConfig {
        DecoderConfig {
            hidden: 8,
            mlp_layers: 2,
            cond_hidden: 4,
            noise_bands: 8,
            sinusoids: 8,
            frame_len: 16,
            reverb_len: 32,
            noise_bias: -2.0,
            amp_bias: -2.0,
            ..DecoderConfig::default()
        }
    }

    fn tiny_embedder() -> EmbedderConfig {
        EmbedderConfig {
            dim: 2,
            seed: 5,
            fft_size: 64,
            hop: 32,
            bands: 6,
            sample_rate: 8000,
        }
    }

    fn tiny_set() -> (TrainingSet, ClassStatsSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let emb = BuiltinEmbedder::new(tiny_embedder()).unwrap();
        let mut clips = Vec::new();
        for i in 0..4 {
            let samples: Vec<f64> = (0..256)
                .map(|t| {
                    if i % 2 == 0 {
                        rng.gen_range(-0.3..0.3)
                    } else if t % 64 == 0 {
                        0.9
                    } else {
                        0.0
                    }
                })
                .collect();
            clips.push((AudioClip::new(samples, 8000, format!("c{i}")).unwrap(), if i % 2 == 0 { "a" } else { "b" }.to_string()));
        }
        let groups: Vec<(String, Vec<Vec<f64>>)> = ["a", "b"]
            .iter()
            .map(|l| {
                let e = clips
                    .iter()
                    .filter(|(_, c)| c == l)
                    .map(|(a, _)| emb.embed(a).unwrap().vector)
                    .collect();
                (l.to_string(), e)
            })
            .collect();
        let stats = ClassStatsSet::fit(StatsSource::Builtin { embedder: tiny_embedder() }, &groups, 1e-3).unwrap();
        let set = TrainingSet::prepare(clips, &stats, None, 16).unwrap();
        (set, stats)
    }

    fn tiny_ckpt(labels: Vec<String>) -> Checkpoint {
        let data = DataConfig {
            sample_rate: 8000,
            embedder: tiny_embedder(),
            judge: tiny_embedder(),
            ..DataConfig::default()
        };
        Checkpoint::init(tiny_decoder(), data, labels, String::new()).unwrap()
    }

    fn tiny_train_cfg(epochs: usize, lambda: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            lr: 1e-3,
            stft_scales: vec![64, 32, 16],
            transient_loss_weight: lambda,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lambda_zero_never_reads_sparse_targets() {
        let (set, stats) = tiny_set();
        let ck = train(tiny_ckpt(stats.labels()), &set, &tiny_train_cfg(2, 0.0)).unwrap();
        assert_eq!(set.x_s_reads(), 0);
        assert_eq!(ck.meta.loss_history.len(), 2);
        assert!(ck.meta.loss_history.iter().all(|r| r.transient_loss == 0.0));
        train(tiny_ckpt(stats.labels()), &set, &tiny_train_cfg(1, 1.0)).unwrap();
        assert!(set.x_s_reads() > 0);
    }

    #[test]
    fn training_is_deterministic_and_schedules_lr() {
        let (set, stats) = tiny_set();
        let cfg = tiny_train_cfg(5, 1.0);
        let a = train(tiny_ckpt(stats.labels()), &set, &cfg).unwrap();
        let b = train(tiny_ckpt(stats.labels()), &set, &cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let lrs: Vec<f64> = a.meta.loss_history.iter().map(|r| r.lr).collect();
        assert_eq!(lrs, vec![1e-3, 1e-3, 1e-3, 1e-3, 1e-5]);
        assert!(a.is_trained());
        assert!(a.meta.loss_history.iter().all(|r| r.recon_loss >= 0.0));
    }

    #[test]
    fn empty_split_is_an_error() {
        let (_, stats) = tiny_set();
        let empty = TrainingSet::new(Vec::new(), PeakConfig::default());
        assert!(matches!(
            train(tiny_ckpt(stats.labels()), &empty, &tiny_train_cfg(1, 1.0)),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn finetune_freezes_everything_but_conditioning() {
        let (set, stats) = tiny_set();
        let trained = train(tiny_ckpt(stats.labels()), &set, &tiny_train_cfg(3, 1.0)).unwrap();
        let cfg = FinetuneConfig {
            epochs: 2,
            batch_size: 2,
            lr: 1e-2,
            ..FinetuneConfig::default()
        };
        let tuned = finetune(trained.clone(), &set, &stats, &cfg).unwrap();
        let mut changed = 0;
        for (name, t) in trained.weights.params.iter() {
            let after = tuned.weights.params.get(name).unwrap();
            if DecoderWeights::is_conditioning(name) {
                changed += usize::from(after != t);
            } else {
                assert_eq!(after.data(), t.data(), "{name} changed");
            }
        }
        assert!(changed > 0);
        assert_eq!(tuned.meta.finetune_history.len(), 2);
        let again = finetune(trained, &set, &stats, &cfg).unwrap();
        assert_eq!(again.to_bytes(), tuned.to_bytes());
    }

    #[test]
    fn finetune_needs_builtin_stats() {
        let (set, stats) = tiny_set();
        let ext = ClassStatsSet {
            source: StatsSource::External { dim: 2 },
            classes: stats.classes.clone(),
        };
        let r = finetune(tiny_ckpt(stats.labels()), &set, &ext, &FinetuneConfig::default());
        assert!(matches!(r, Err(Error::MissingStats(_))));
        let one = ClassStatsSet {
            source: stats.source.clone(),
            classes: vec![stats.classes[0].clone()],
        };
        let r = finetune(tiny_ckpt(stats.labels()), &set, &one, &FinetuneConfig::default());
        assert!(matches!(r, Err(Error::MissingStats(_))));
    }

    fn with_range(mut s: ClassStats, lo: f64, hi: f64) -> ClassStats {
        s.md_min = lo;
        s.md_max = hi;
        s
    }

    #[test]
    fn measured_similarity_gradient() {
        let emb = BuiltinEmbedder::new(tiny_embedder()).unwrap();
        let stats = ClassStatsSet {
            source: StatsSource::Builtin { embedder: tiny_embedder() },
            classes: vec![
                with_range(ClassStats::from_moments("a", vec![0.1, -0.2], vec![1.0, 0.2, 0.2, 0.5], 1e-3).unwrap(), 0.5, 20.0),
                with_range(ClassStats::from_moments("b", vec![-0.3, 0.4], vec![0.7, -0.1, -0.1, 0.9], 1e-3).unwrap(), 1.0, 30.0),
            ],
        };
        let x0 = random_tensor(&[200], 12, 0.5);
        let worst = check_gradients(&[x0], 1e-6, |_, v| measure_similarity_var(v[0], &emb, &stats, 0.02, 0.01).sum());
        assert!(worst < 1e-4, "{worst}");
    }
}
