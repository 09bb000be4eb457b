use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamConfig, AdamState, DecoderConfig, DecoderWeights, ParamStore};
use crate::autodiff::Tensor;
use crate::config::{DataConfig, FinetuneConfig, TrainConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SIMISFX\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
const WEIGHT: &str = "w.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub recon_loss: f64,
    pub transient_loss: f64,
    pub lr: f64,
}

/// Everything in a checkpoint besides tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub decoder: DecoderConfig,
    pub data: DataConfig,
    pub class_labels: Vec<String>,
    pub train: Option<TrainConfig>,
    pub finetune: Option<FinetuneConfig>,
    /// Completed reconstruction-training epochs.
    pub epoch: usize,
    /// Completed fine-tuning epochs.
    pub finetune_epochs: usize,
    pub loss_history: Vec<LossRecord>,
    /// `(epoch, loss)` per fine-tuning epoch.
    pub finetune_history: Vec<(usize, f64)>,
    /// Content hash of the class statistics used for conditioning.
    pub stats_hash: String,
    pub adam: AdamConfig,
    pub adam_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub weights: DecoderWeights,
    pub adam: AdamState,
}

impl Checkpoint {
    /// Freshly initialized, untrained checkpoint.
    pub fn init(decoder: DecoderConfig, data: DataConfig, class_labels: Vec<String>, stats_hash: String) -> Result<Self> {
        if decoder.n_classes != class_labels.len() {
            return Err(Error::Config(format!(
                "model.n_classes is {} but there are {} class labels",
                decoder.n_classes,
                class_labels.len()
            )));
        }
        let weights = DecoderWeights::init(decoder.clone())?;
        Ok(Self {
            meta: CheckpointMeta {
                decoder,
                data,
                class_labels,
                train: None,
                finetune: None,
                epoch: 0,
                finetune_epochs: 0,
                loss_history: Vec::new(),
                finetune_history: Vec::new(),
                stats_hash,
                adam: AdamConfig::default(),
                adam_step: 0,
            },
            weights,
            adam: AdamState::default(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = self.meta.clone();
        meta.adam_step = self.adam.step;
        meta.decoder = self.weights.config.clone();
        let json = serde_json::to_vec(&meta).expect("metadata serializes");

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);

        let mut table: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        for (k, t) in self.weights.params.iter() {
            table.push((format!("{WEIGHT}{k}"), t.shape().to_vec(), t.data()));
        }
        for (k, v) in &self.adam.m {
            table.push((format!("{ADAM_M}{k}"), vec![v.len()], v));
        }
        for (k, v) in &self.adam.v {
            table.push((format!("{ADAM_V}{k}"), vec![v.len()], v));
        }
        out.extend_from_slice(&(table.len() as u32).to_le_bytes());
        for (name, shape, data) in table {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in &shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 20 {
            return Err(Error::Checksum);
        }
        let (body, sum) = bytes.split_at(bytes.len() - 8);
        if checksum(body) != sum {
            return Err(Error::Checksum);
        }

        let mut r = Reader { buf: body, pos: 12 };
        let json_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        let mut adam = AdamState {
            step: meta.adam_step,
            ..AdamState::default()
        };
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = r.u64()? as usize;
            let raw = r.take(n.checked_mul(8).ok_or(Error::Checksum)?)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if let Some(k) = name.strip_prefix(ADAM_M) {
                adam.m.insert(k.to_string(), data);
            } else if let Some(k) = name.strip_prefix(ADAM_V) {
                adam.v.insert(k.to_string(), data);
            } else if let Some(k) = name.strip_prefix(WEIGHT) {
                params.insert(k, Tensor::new(shape, data)?);
            } else {
                return Err(Error::Format(format!("unknown tensor `{name}`")));
            }
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after tensor table".into()));
        }
        let weights = DecoderWeights {
            config: meta.decoder.clone(),
            params,
        };
        Ok(Self { meta, weights, adam })
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> String {
        crate::similarity::hex(&Sha256::digest(self.to_bytes()))
    }

    pub fn is_trained(&self) -> bool {
        self.meta.epoch > 0
    }
}

fn checksum(bytes: &[u8]) -> [u8; 8] {
    let d = Sha256::digest(bytes);
    d[..8].try_into().expect("8 bytes")
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format("checkpoint record runs past the end".into())),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Writes via a temporary file and rename so readers never see a partial
/// checkpoint.
pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, c.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
