use std::path::Path;

use serde_json::{json, Value};
use simi_sfx_core::audio_io::{write_clip, AudioClip, Split, WavEncoding};
use simi_sfx_core::config::ProjectConfig;
use simi_sfx_core::dsp::{extract_features, extract_peak_sparse, write_feature_track, PeakConfig};
use simi_sfx_core::evaluation::{
    controllability_sweep, density_table, evaluate_reconstruction, kde_report, regression_table, sweep_report,
    Judge, SweepSpec,
};
use simi_sfx_core::nn::{load_checkpoint, save_checkpoint, Checkpoint};
use simi_sfx_core::similarity::{
    embeddings_to_text, BuiltinEmbedder, ClassStatsSet, Embedding, EmbeddingSource, SimilarityVector, StatsSource,
};
use simi_sfx_core::synthesis::synthesize;
use simi_sfx_core::training::{finetune, loss_history_text, total_loss, train, TrainingSet};
use simi_sfx_core::Error;

use crate::args::{Command, GlobalArgs, SplitArg};
use crate::data::*;
use crate::error::{CliError, CliResult};

fn split_of(s: SplitArg) -> Option<Split> {
    match s {
        SplitArg::Train => Some(Split::Train),
        SplitArg::Test => Some(Split::Test),
        SplitArg::All => None,
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn dry(command: &str, extra: Value) -> Value {
    let mut v = json!({ "command": command, "dry_run": true, "ok": true });
    if let (Value::Object(m), Value::Object(e)) = (&mut v, extra) {
        m.extend(e);
    }
    v
}

/// Checkpoint commands follow the data settings stored with the model.
fn with_checkpoint_data(mut cfg: ProjectConfig, ckpt: &Checkpoint) -> ProjectConfig {
    cfg.data = ckpt.meta.data.clone();
    cfg
}

fn check_stats_labels(stats: &ClassStatsSet, labels: &[String]) -> CliResult<()> {
    if stats.labels() != labels {
        return Err(Error::MissingStats(format!(
            "statistics cover {:?}, manifest classes are {labels:?}",
            stats.labels()
        ))
        .into());
    }
    Ok(())
}

fn check_stats_hash(stats: &ClassStatsSet, ckpt: &Checkpoint) -> CliResult<()> {
    if stats.content_hash() != ckpt.meta.stats_hash {
        return Err(Error::MissingStats("statistics file differs from the one the checkpoint was trained with".into()).into());
    }
    Ok(())
}

fn judge_stats(
    judge: &BuiltinEmbedder,
    clips: &[(AudioClip, String)],
    labels: &[String],
    cfg: &ProjectConfig,
) -> CliResult<ClassStatsSet> {
    let groups = embedding_groups(clips, labels, Some(judge), None)?;
    Ok(ClassStatsSet::fit(
        StatsSource::Builtin {
            embedder: *judge.config(),
        },
        &groups,
        cfg.data.epsilon_scale,
    )?)
}

/// Runs one subcommand and returns its JSON summary.
pub fn run(global: &GlobalArgs, command: Command) -> CliResult<Value> {
    let mut cfg = load_config(global.config.as_deref())?;
    if let Some(s) = global.seed {
        cfg.train.seed = s;
        cfg.finetune.seed = s;
    }
    let seed = global.seed.unwrap_or(0);
    let dry_run = global.dry_run;

    match command {
        Command::Features { manifest: mp, out, split } => {
            let m = manifest(&mp, &cfg)?;
            let f = cfg.model.frame_len;
            let entries: Vec<_> = m.entries.iter().filter(|e| split_of(split).is_none_or(|s| e.split == s)).collect();
            if dry_run {
                entries.iter().try_for_each(|e| ensure_exists(&e.resolved))?;
                return Ok(dry("features", json!({ "clips": entries.len() })));
            }
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let peak = PeakConfig {
                frame_len: f,
                ..PeakConfig::default()
            };
            for e in &entries {
                let clip = load_entry(&e.resolved, e.id(), &cfg)?;
                let stem = file_stem_for(e.id());
                write_feature_track(&extract_features(&clip, f, f)?, &out.join(format!("{stem}.features.tsv")))?;
                let xs = extract_peak_sparse(&clip, &peak)?;
                let xs_clip = AudioClip::new(xs.samples, clip.sample_rate(), clip.id())?;
                write_clip(&xs_clip, &out.join(format!("{stem}.xs.wav")), WavEncoding::Float32)?;
            }
            Ok(json!({ "command": "features", "clips": entries.len(), "out": out }))
        }

        Command::Embed { manifest: mp, out, external } => {
            let m = manifest(&mp, &cfg)?;
            let ext = load_embeddings(external.as_deref())?;
            if let Some(map) = &ext {
                if let Some(e) = m.entries.iter().find(|e| !map.contains_key(e.id())) {
                    return Err(Error::MissingEmbedding(e.id().to_string()).into());
                }
            }
            if dry_run {
                if ext.is_none() {
                    m.entries.iter().try_for_each(|e| ensure_exists(&e.resolved))?;
                }
                return Ok(dry("embed", json!({ "clips": m.entries.len() })));
            }
            let embeddings: Vec<Embedding> = match &ext {
                Some(map) => m.entries.iter().map(|e| map[e.id()].clone()).collect(),
                None => {
                    let embedder = BuiltinEmbedder::new(cfg.data.embedder)?;
                    m.entries
                        .iter()
                        .map(|e| Ok(embedder.embed(&load_entry(&e.resolved, e.id(), &cfg)?)?))
                        .collect::<CliResult<_>>()?
                }
            };
            write_text(&out, &embeddings_to_text(&embeddings)?)?;
            let source = if ext.is_some() { EmbeddingSource::External } else { EmbeddingSource::Builtin };
            Ok(json!({
                "command": "embed",
                "clips": embeddings.len(),
                "dim": embeddings.first().map_or(0, |e| e.vector.len()),
                "source": format!("{source:?}").to_lowercase(),
                "out": out,
            }))
        }

        Command::Stats { manifest: mp, out, embeddings } => {
            let m = manifest(&mp, &cfg)?;
            let ext = load_embeddings(embeddings.as_deref())?;
            let train_entries = m.split(Split::Train).count();
            if dry_run {
                if ext.is_none() {
                    m.split(Split::Train).try_for_each(|e| ensure_exists(&e.resolved))?;
                }
                return Ok(dry("stats", json!({ "classes": m.num_classes(), "clips": train_entries })));
            }
            let clips = load_split(&m, Some(Split::Train), &cfg)?;
            let (embedder, source) = match &ext {
                Some(map) => {
                    let dim = map.values().next().map_or(0, |e| e.vector.len());
                    (None, StatsSource::External { dim })
                }
                None => (
                    Some(BuiltinEmbedder::new(cfg.data.embedder)?),
                    StatsSource::Builtin {
                        embedder: cfg.data.embedder,
                    },
                ),
            };
            let groups = embedding_groups(&clips, &m.class_labels, embedder.as_ref(), ext.as_ref())?;
            let stats = ClassStatsSet::fit(source, &groups, cfg.data.epsilon_scale)?;
            stats.save(&out)?;
            Ok(json!({
                "command": "stats",
                "classes": stats.labels(),
                "dim": stats.dim(),
                "content_hash": stats.content_hash(),
                "out": out,
            }))
        }

        Command::Train { manifest: mp, stats, out, embeddings, resume, history } => {
            let m = manifest(&mp, &cfg)?;
            let stats = load_stats(&stats)?;
            check_stats_labels(&stats, &m.class_labels)?;
            let ext = load_embeddings(embeddings.as_deref())?;
            let mut model = cfg.model.clone();
            model.n_classes = m.num_classes();
            let ckpt = match &resume {
                Some(p) => {
                    let c = load_checkpoint(p)?;
                    check_stats_hash(&stats, &c)?;
                    c
                }
                None => Checkpoint::init(model, cfg.data.clone(), m.class_labels.clone(), stats.content_hash())?,
            };
            if dry_run {
                m.split(Split::Train).try_for_each(|e| ensure_exists(&e.resolved))?;
                return Ok(dry("train", json!({ "epochs": cfg.train.epochs, "start_epoch": ckpt.meta.epoch })));
            }
            let clips = load_split(&m, Some(Split::Train), &cfg)?;
            let set = TrainingSet::prepare(clips, &stats, ext.as_ref(), ckpt.weights.config.frame_len)?;
            let trained = train(ckpt, &set, &cfg.train)?;
            save_checkpoint(&trained, &out)?;
            if let Some(h) = &history {
                write_text(h, &loss_history_text(&trained.meta.loss_history))?;
            }
            let last = trained.meta.loss_history.last().expect("at least one epoch");
            Ok(json!({
                "command": "train",
                "epochs": trained.meta.epoch,
                "final_loss": total_loss(last, cfg.train.transient_loss_weight),
                "content_hash": trained.content_hash(),
                "out": out,
            }))
        }

        Command::Finetune { checkpoint, manifest: mp, stats, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let cfg = with_checkpoint_data(cfg, &ckpt);
            let m = manifest(&mp, &cfg)?;
            let stats = load_stats(&stats)?;
            check_stats_labels(&stats, &ckpt.meta.class_labels)?;
            check_stats_hash(&stats, &ckpt)?;
            if !ckpt.is_trained() {
                return Err(Error::Untrained.into());
            }
            if dry_run {
                m.split(Split::Train).try_for_each(|e| ensure_exists(&e.resolved))?;
                return Ok(dry("finetune", json!({ "epochs": cfg.finetune.epochs })));
            }
            let clips = load_split(&m, Some(Split::Train), &cfg)?;
            let set = TrainingSet::prepare(clips, &stats, None, ckpt.weights.config.frame_len)?;
            let tuned = finetune(ckpt, &set, &stats, &cfg.finetune)?;
            save_checkpoint(&tuned, &out)?;
            Ok(json!({
                "command": "finetune",
                "epochs": tuned.meta.finetune_epochs,
                "final_loss": tuned.meta.finetune_history.last().map(|h| h.1),
                "content_hash": tuned.content_hash(),
                "out": out,
            }))
        }

        Command::Synth { checkpoint, reference, manifest: mp, similarity, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let cfg = with_checkpoint_data(cfg, &ckpt);
            let values = parse_similarity(&similarity)?;
            let n = ckpt.weights.config.n_classes;
            if values.len() != n {
                return Err(Error::Dimension {
                    expected: n,
                    found: values.len(),
                }
                .into());
            }
            let sim = SimilarityVector::new(values)?;
            let m = mp.map(|p| manifest(&p, &cfg)).transpose()?;
            let clip = load_reference(&reference, m.as_ref(), &cfg)?;
            if dry_run {
                return Ok(dry("synth", json!({ "samples": clip.len() })));
            }
            let f = ckpt.weights.config.frame_len;
            let features = extract_features(&clip, f, f)?;
            let audio = synthesize(&features, &sim, &ckpt.weights, seed)?.export(clip.len());
            write_clip(&AudioClip::new(audio, clip.sample_rate(), "render")?, &out, WavEncoding::Float32)?;
            Ok(json!({
                "command": "synth",
                "samples": clip.len(),
                "sample_rate": clip.sample_rate(),
                "seed": seed,
                "out": out,
            }))
        }

        Command::Sweep { checkpoint, manifest: mp, reference, channel, steps, fixed, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let cfg = with_checkpoint_data(cfg, &ckpt);
            let m = manifest(&mp, &cfg)?;
            let spec = SweepSpec {
                channel,
                steps,
                fixed_value: fixed,
                reference: reference.clone(),
            };
            let n = ckpt.weights.config.n_classes;
            if channel >= n {
                return Err(CliError::usage(format!("channel {channel} out of range for {n} classes")));
            }
            if steps < 3 {
                return Err(CliError::usage("a sweep needs at least 3 steps"));
            }
            if !ckpt.is_trained() {
                return Err(Error::Untrained.into());
            }
            let clip = load_reference(&reference, Some(&m), &cfg)?;
            if dry_run {
                return Ok(dry("sweep", json!({ "steps": steps })));
            }
            let judge_embedder = BuiltinEmbedder::new(cfg.data.judge)?;
            let clips = load_split(&m, Some(Split::Train), &cfg)?;
            let jstats = judge_stats(&judge_embedder, &clips, &ckpt.meta.class_labels, &cfg)?;
            let judge = Judge {
                embedder: &judge_embedder,
                stats: &jstats,
            };
            let points = controllability_sweep(&ckpt, &clip, &spec, &judge, seed)?;
            let r = sweep_report(points, channel)?;
            let table = regression_table(&r);
            if let Some(o) = &out {
                write_text(o, &table)?;
            }
            Ok(json!({
                "command": "sweep",
                "channel": channel,
                "steps": r.points.len(),
                "a": r.a,
                "b": r.b,
                "r_squared": r.r_squared,
                "points": r.points,
            }))
        }

        Command::Evaluate { checkpoint, manifest: mp, stats, embeddings, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let cfg = with_checkpoint_data(cfg, &ckpt);
            let m = manifest(&mp, &cfg)?;
            let stats = load_stats(&stats)?;
            check_stats_labels(&stats, &ckpt.meta.class_labels)?;
            let ext = load_embeddings(embeddings.as_deref())?;
            if dry_run {
                m.split(Split::Test).try_for_each(|e| ensure_exists(&e.resolved))?;
                return Ok(dry("evaluate", json!({ "clips": m.split(Split::Test).count() })));
            }
            let clips = load_split(&m, Some(Split::Test), &cfg)?;
            let set = TrainingSet::prepare(clips, &stats, ext.as_ref(), ckpt.weights.config.frame_len)?;
            let judge = BuiltinEmbedder::new(cfg.data.judge)?;
            let report = evaluate_reconstruction(&ckpt.weights, &set, &ckpt.meta.class_labels, &judge, seed)?;
            if let Some(o) = &out {
                write_text(o, &report.to_table())?;
            }
            Ok(json!({ "command": "evaluate", "rows": report.rows }))
        }

        Command::Kde { manifest: mp, stats, embeddings, split, out } => {
            let m = manifest(&mp, &cfg)?;
            let stats = load_stats(&stats)?;
            check_stats_labels(&stats, &m.class_labels)?;
            let ext = load_embeddings(embeddings.as_deref())?;
            let embedder = stats_embedder(&stats)?;
            if embedder.is_none() && ext.is_none() {
                return Err(CliError::usage("external statistics need --embeddings"));
            }
            if dry_run {
                return Ok(dry("kde", json!({ "classes": stats.len() })));
            }
            let clips = load_split(&m, split_of(split), &cfg)?;
            let groups = embedding_groups(&clips, &m.class_labels, embedder.as_ref(), ext.as_ref())?;
            let scores: Vec<SimilarityVector> = groups
                .iter()
                .flat_map(|(_, g)| g.iter())
                .map(|v| stats.score(v))
                .collect::<Result<_, _>>()?;
            let report = kde_report(&scores, &stats.labels())?;
            let table = density_table(&report);
            if let Some(o) = &out {
                write_text(o, &table)?;
            }
            let classes: Vec<Value> = report
                .iter()
                .map(|(label, d)| json!({ "class": label, "bandwidth": d.bandwidth, "points": d.sample_points.len() }))
                .collect();
            Ok(json!({ "command": "kde", "clips": scores.len(), "classes": classes }))
        }

        Command::Serve { checkpoints, stats, manifest: mp, addr, workers } => {
            let state = crate::server::ServiceState::load(&checkpoints, &stats, &mp, &cfg, workers)?;
            if dry_run {
                return Ok(dry("serve", json!({ "models": state.model_ids(), "addr": addr.to_string() })));
            }
            crate::server::serve_blocking(state, addr)?;
            Ok(json!({ "command": "serve", "stopped": true }))
        }
    }
}
