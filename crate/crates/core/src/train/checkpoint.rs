//! Versioned binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! "EACK" u32:version
//! u32:len  config JSON
//! [u8; 32] dataset fingerprint (SHA-256)
//! u32:n    n × (u16:len name, u32:rows, u32:cols, f64 × rows·cols)
//! u8:kind  0 = SGD (velocity), 1 = Adam (u64 step, m, v); moments as tensors
//! u32:n    Φ history, f64 × n
//! u32:n    n × (f64 train_loss, f64 val_ap, u8 has_attc, f64 val_attc, f64 phi_used)
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::{DataError, Dataset};
use crate::model::Model;
use crate::tensor::Tensor;

use super::{EpochRecord, OptimizerState, Result, TrainConfig, TrainError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EACK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Per-epoch metrics stored in a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub train_loss: f64,
    pub val_ap: f64,
    pub val_attc: Option<f64>,
    pub phi_used: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: OptimizerState,
    pub phi_history: Vec<f64>,
    pub history: Vec<EpochMetrics>,
    pub dataset_fingerprint: [u8; 32],
}

impl Checkpoint {
    pub(crate) fn capture(
        config: &TrainConfig,
        model: &Model,
        optimizer: &OptimizerState,
        phi_history: &[f64],
        history: &[EpochRecord],
        dataset_fingerprint: [u8; 32],
    ) -> Self {
        Self {
            config: config.clone(),
            params: model
                .named_params()
                .into_iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            optimizer: optimizer.clone(),
            phi_history: phi_history.to_vec(),
            history: history
                .iter()
                .map(|r| EpochMetrics {
                    train_loss: r.train_loss,
                    val_ap: r.val_ap,
                    val_attc: r.val_attc,
                    phi_used: r.phi_used,
                })
                .collect(),
            dataset_fingerprint,
        }
    }

    pub fn epochs_completed(&self) -> usize {
        self.history.len()
    }

    /// Rebuilds the model from the stored configuration and parameters.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::init(&self.config.model)?;
        let names: Vec<&str> = model.named_params().iter().map(|(n, _)| *n).collect();
        let stored: Vec<&str> = self.params.iter().map(|(n, _)| n.as_str()).collect();
        if names != stored {
            return Err(TrainError::Checkpoint {
                path: String::new(),
                reason: format!("parameter names {stored:?} do not match the model ({names:?})"),
            });
        }
        model.set_params(self.params.iter().map(|(_, t)| t.clone()).collect())?;
        Ok(model)
    }

    pub fn fingerprint_hex(&self) -> String {
        self.dataset_fingerprint
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// SHA-256 over the training and validation splits.
pub fn dataset_fingerprint(train: &Dataset, val: &Dataset) -> [u8; 32] {
    let mut h = Sha256::new();
    for (tag, ds) in [("train", train), ("val", val)] {
        h.update(tag.as_bytes());
        for d in [ds.dims.global_dim, ds.dims.num_locals, ds.dims.local_dim] {
            h.update((d as u64).to_le_bytes());
        }
        h.update((ds.clips.len() as u64).to_le_bytes());
        for clip in &ds.clips {
            h.update(serde_json::to_vec(&clip.annotation).expect("annotation serializes"));
            let f = &clip.features;
            for v in f.global.data() {
                h.update(v.to_le_bytes());
            }
            for l in &f.locals {
                for v in l.data() {
                    h.update(v.to_le_bytes());
                }
            }
            for m in &f.mask {
                h.update(m.iter().map(|&b| u8::from(b)).collect::<Vec<_>>());
            }
        }
    }
    h.finalize().into()
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend((t.rows() as u32).to_le_bytes());
    out.extend((t.cols() as u32).to_le_bytes());
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

/// Serializes a checkpoint.
pub fn write_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(CHECKPOINT_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&ckpt.config).expect("config serializes");
    out.extend((config.len() as u32).to_le_bytes());
    out.extend(config);
    out.extend(ckpt.dataset_fingerprint);
    out.extend((ckpt.params.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.params {
        out.extend((name.len() as u16).to_le_bytes());
        out.extend(name.as_bytes());
        put_tensor(&mut out, t);
    }
    match &ckpt.optimizer {
        OptimizerState::Sgd { velocity } => {
            out.push(0);
            velocity.iter().for_each(|t| put_tensor(&mut out, t));
        }
        OptimizerState::Adam { step, m, v } => {
            out.push(1);
            out.extend(step.to_le_bytes());
            m.iter().chain(v).for_each(|t| put_tensor(&mut out, t));
        }
    }
    out.extend((ckpt.phi_history.len() as u32).to_le_bytes());
    for p in &ckpt.phi_history {
        out.extend(p.to_le_bytes());
    }
    out.extend((ckpt.history.len() as u32).to_le_bytes());
    for h in &ckpt.history {
        out.extend(h.train_loss.to_le_bytes());
        out.extend(h.val_ap.to_le_bytes());
        out.push(u8::from(h.val_attc.is_some()));
        out.extend(h.val_attc.unwrap_or(0.0).to_le_bytes());
        out.extend(h.phi_used.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn tensor(&mut self) -> std::result::Result<Tensor, String> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let len = rows
            .checked_mul(cols)
            .filter(|&n| n.saturating_mul(8) <= self.bytes.len() - self.pos)
            .ok_or_else(|| {
                format!(
                    "tensor {rows}×{cols} overruns the file at byte {}",
                    self.pos
                )
            })?;
        let data = (0..len)
            .map(|_| self.f64())
            .collect::<std::result::Result<_, _>>()?;
        Tensor::new(rows, cols, data).map_err(|e| e.to_string())
    }

    fn tensors(&mut self, n: usize) -> std::result::Result<Vec<Tensor>, String> {
        (0..n).map(|_| self.tensor()).collect()
    }
}

fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)
        .map_err(|_| "file too short for magic".to_string())?
        != CHECKPOINT_MAGIC
    {
        return Err("bad magic; not a checkpoint file".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!(
            "unsupported checkpoint version {version} (this build reads version {CHECKPOINT_VERSION})"
        ));
    }
    let len = r.u32()? as usize;
    let config: TrainConfig =
        serde_json::from_slice(r.take(len)?).map_err(|e| format!("config: {e}"))?;
    let dataset_fingerprint = r.array::<32>()?;
    let n = r.u32()? as usize;
    let mut params = Vec::new();
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| "parameter name is not UTF-8".to_string())?
            .to_string();
        params.push((name, r.tensor()?));
    }
    let optimizer = match r.u8()? {
        0 => OptimizerState::Sgd {
            velocity: r.tensors(n)?,
        },
        1 => OptimizerState::Adam {
            step: r.u64()?,
            m: r.tensors(n)?,
            v: r.tensors(n)?,
        },
        k => return Err(format!("unknown optimizer kind {k}")),
    };
    let phi_len = r.u32()? as usize;
    let phi_history = (0..phi_len)
        .map(|_| r.f64())
        .collect::<std::result::Result<_, _>>()?;
    let hist_len = r.u32()? as usize;
    let mut history = Vec::new();
    for _ in 0..hist_len {
        let train_loss = r.f64()?;
        let val_ap = r.f64()?;
        let has = r.u8()?;
        let attc = r.f64()?;
        let phi_used = r.f64()?;
        history.push(EpochMetrics {
            train_loss,
            val_ap,
            val_attc: match has {
                0 => None,
                1 => Some(attc),
                b => return Err(format!("bad ATTC flag {b}")),
            },
            phi_used,
        });
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(Checkpoint {
        config,
        params,
        optimizer,
        phi_history,
        history,
        dataset_fingerprint,
    })
}

/// Parses checkpoint bytes.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    decode(bytes).map_err(|reason| TrainError::Checkpoint {
        path: "<bytes>".into(),
        reason,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, write_checkpoint(ckpt)).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| match source.kind() {
        std::io::ErrorKind::NotFound => {
            TrainError::Data(DataError::MissingFile(path.to_path_buf()))
        }
        _ => TrainError::Io {
            path: path.display().to_string(),
            source,
        },
    })?;
    decode(&bytes).map_err(|reason| TrainError::Checkpoint {
        path: path.display().to_string(),
        reason,
    })
}
