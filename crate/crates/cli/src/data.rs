//! Config, manifest and artifact loading shared by the subcommands and
//! the service.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use simi_sfx_core::audio_io::{load_clip, load_manifest_with_ratio, AudioClip, DatasetManifest, Split};
use simi_sfx_core::config::ProjectConfig;
use simi_sfx_core::similarity::{
    load_external_embeddings, BuiltinEmbedder, ClassStatsSet, Embedding, StatsSource,
};
use simi_sfx_core::Error;

use crate::error::{CliError, CliResult};

/// Reads a TOML config; a missing path gives the defaults.
pub fn load_config(path: Option<&Path>) -> CliResult<ProjectConfig> {
    let cfg = match path {
        None => ProjectConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::from(Error::io(p, e)))?;
            parse_config(&text)?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(text: &str) -> CliResult<ProjectConfig> {
    toml::from_str(text).map_err(|e| CliError::runtime("config", e.message().to_string()))
}

pub fn config_to_toml(cfg: &ProjectConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}

pub fn manifest(path: &Path, cfg: &ProjectConfig) -> CliResult<DatasetManifest> {
    let m = load_manifest_with_ratio(path, cfg.data.train_ratio)?;
    if m.entries.is_empty() {
        return Err(Error::EmptyDataset(format!("{} lists no clips", path.display())).into());
    }
    Ok(m)
}

/// Loads one clip, using the manifest path as its id.
pub fn load_entry(resolved: &Path, id: &str, cfg: &ProjectConfig) -> CliResult<AudioClip> {
    let clip = load_clip(resolved, cfg.data.sample_rate, cfg.data.clip_seconds)?;
    Ok(AudioClip::new(clip.into_samples(), cfg.data.sample_rate, id)?)
}

/// `(clip, class)` pairs of one split (all entries when `split` is `None`).
pub fn load_split(m: &DatasetManifest, split: Option<Split>, cfg: &ProjectConfig) -> CliResult<Vec<(AudioClip, String)>> {
    m.entries
        .iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .map(|e| Ok((load_entry(&e.resolved, e.id(), cfg)?, e.class.clone())))
        .collect()
}

/// A reference clip given either as a manifest id or as a WAV path.
pub fn load_reference(reference: &str, m: Option<&DatasetManifest>, cfg: &ProjectConfig) -> CliResult<AudioClip> {
    if let Some(e) = m.and_then(|m| m.entry(reference)) {
        return load_entry(&e.resolved, e.id(), cfg);
    }
    load_entry(&PathBuf::from(reference), reference, cfg)
}

pub fn load_stats(path: &Path) -> CliResult<ClassStatsSet> {
    Ok(ClassStatsSet::load(path)?)
}

pub fn load_embeddings(path: Option<&Path>) -> CliResult<Option<BTreeMap<String, Embedding>>> {
    path.map(|p| load_external_embeddings(p).map_err(CliError::from)).transpose()
}

/// Per-class embedding groups in manifest label order.
pub fn embedding_groups(
    clips: &[(AudioClip, String)],
    labels: &[String],
    embedder: Option<&BuiltinEmbedder>,
    external: Option<&BTreeMap<String, Embedding>>,
) -> CliResult<Vec<(String, Vec<Vec<f64>>)>> {
    let mut groups: Vec<(String, Vec<Vec<f64>>)> = labels.iter().map(|l| (l.clone(), Vec::new())).collect();
    for (clip, class) in clips {
        let v = match (embedder, external) {
            (Some(e), _) => e.embed(clip)?.vector,
            (None, Some(map)) => map
                .get(clip.id())
                .map(|e| e.vector.clone())
                .ok_or_else(|| Error::MissingEmbedding(clip.id().to_string()))?,
            (None, None) => return Err(CliError::usage("no embedding source")),
        };
        let g = groups
            .iter_mut()
            .find(|(l, _)| l == class)
            .expect("labels come from the same manifest");
        g.1.push(v);
    }
    Ok(groups)
}

/// Embedder matching a stats file, or `None` for external statistics.
pub fn stats_embedder(stats: &ClassStatsSet) -> CliResult<Option<BuiltinEmbedder>> {
    match &stats.source {
        StatsSource::Builtin { embedder } => Ok(Some(BuiltinEmbedder::new(*embedder)?)),
        StatsSource::External { .. } => Ok(None),
    }
}

pub fn parse_similarity(text: &str) -> CliResult<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::usage(format!("similarity value `{}` is not a number", s.trim())))
        })
        .collect()
}

pub fn ensure_exists(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::runtime("io", format!("{} does not exist", path.display())))
    }
}

/// File-system-safe form of a clip id.
pub fn file_stem_for(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}
