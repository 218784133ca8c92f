//! Checkpoint container.
//!
//! ```text
//! "AWECKPT1"                      8 bytes
//! header length n                 u64, little-endian
//! header                          n bytes of JSON
//! payload                         f64 little-endian, tensors in header order
//! ```
//!
//! The header records the model configuration, the training configuration
//! as key/value strings, the step, the best validation AP, and for every
//! tensor its name, shape and byte offset into the payload. Model
//! parameters use their canonical names (`encoder.layer0.fwd.w_input`, ...).
//! Checkpoints that can resume a run also carry `adam.m.*` / `adam.v.*`
//! moment arrays, optionally `best.*` parameters, and a `resume` block with
//! the epoch position and random-stream position.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::rnn::{Model, ModelConfig};
use crate::scalar::Scalar;

use super::adam::OptimizerState;

pub const MAGIC: &[u8; 8] = b"AWECKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("truncated checkpoint")]
    Truncated,
    #[error("bad checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name}: shape {found:?} does not match expected {expected:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("bad resume state: {0}")]
    Resume(String),
}

/// Trainer state needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct ResumeState<S> {
    pub epoch: usize,
    /// Next minibatch within the epoch.
    pub batch: usize,
    pub seed: u64,
    /// Random-stream position (in 32-bit words) now.
    pub word_pos: u128,
    /// Stream position before the current epoch's shuffle, if it was drawn.
    pub epoch_word_pos: Option<u128>,
    pub optimizer: OptimizerState<S>,
    /// Best parameters so far and the step they were evaluated at.
    pub best: Option<(Model<S>, u64)>,
    pub evals_since_best: usize,
    pub last_eval_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub model: Model<S>,
    pub config: BTreeMap<String, String>,
    pub step: u64,
    pub best_val_ap: Option<f64>,
    pub resume: Option<ResumeState<S>>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct ResumeHeader {
    epoch: usize,
    batch: usize,
    seed: u64,
    word_pos: String,
    epoch_word_pos: Option<String>,
    optimizer_step: u64,
    best_step: Option<u64>,
    evals_since_best: usize,
    last_eval_step: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train_config: BTreeMap<String, String>,
    step: u64,
    best_val_ap: Option<f64>,
    resume: Option<ResumeHeader>,
    tensors: Vec<TensorEntry>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(model: Model<S>, config: BTreeMap<String, String>) -> Self {
        Self { model, config, step: 0, best_val_ap: None, resume: None }
    }

    fn arrays(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = self.model.named_tensors();
        if let Some(r) = &self.resume {
            out.extend(r.optimizer.names.iter().zip(&r.optimizer.m).map(|(n, t)| (format!("adam.m.{n}"), t)));
            out.extend(r.optimizer.names.iter().zip(&r.optimizer.v).map(|(n, t)| (format!("adam.v.{n}"), t)));
            if let Some((best, _)) = &r.best {
                out.extend(best.named_tensors().into_iter().map(|(n, t)| (format!("best.{n}"), t)));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let arrays = self.arrays();
        let mut offset = 0u64;
        let tensors = arrays
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        let resume = self.resume.as_ref().map(|r| ResumeHeader {
            epoch: r.epoch,
            batch: r.batch,
            seed: r.seed,
            word_pos: r.word_pos.to_string(),
            epoch_word_pos: r.epoch_word_pos.map(|p| p.to_string()),
            optimizer_step: r.optimizer.step,
            best_step: r.best.as_ref().map(|b| b.1),
            evals_since_best: r.evals_since_best,
            last_eval_step: r.last_eval_step,
        });
        let header = Header {
            model: self.model.config.clone(),
            train_config: self.config.clone(),
            step: self.step,
            best_val_ap: self.best_val_ap,
            resume,
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &arrays {
            for &x in t.data() {
                out.extend_from_slice(&x.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 {
            return Err(if bytes.starts_with(&MAGIC[..bytes.len().min(8)]) { CheckpointError::Truncated } else { CheckpointError::BadMagic });
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or(CheckpointError::Truncated)?;
        let header: Header = serde_json::from_slice(json)?;
        let payload = &bytes[16 + len..];
        let mut arrays: BTreeMap<&str, Tensor<S>> = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = payload.get(start..start + 8 * n).ok_or(CheckpointError::Truncated)?;
            let data = raw.chunks_exact(8).map(|c| S::lit(f64::from_le_bytes(c.try_into().expect("8 bytes")))).collect();
            let t = Tensor::new(e.shape.clone(), data)
                .map_err(|_| CheckpointError::Shape { name: e.name.clone(), expected: vec![], found: e.shape.clone() })?;
            arrays.insert(&e.name, t);
        }
        let mut take_model = |prefix: &str| -> Result<Model<S>, CheckpointError> {
            let mut model = Model::zeros(&header.model);
            let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
            for (name, slot) in names.iter().zip(model.tensors_mut()) {
                let key = format!("{prefix}{name}");
                let t = arrays.remove(key.as_str()).ok_or_else(|| CheckpointError::MissingTensor(key.clone()))?;
                if t.shape() != slot.shape() {
                    return Err(CheckpointError::Shape { name: key, expected: slot.shape().to_vec(), found: t.shape().to_vec() });
                }
                *slot = t;
            }
            Ok(model)
        };
        let model = take_model("")?;
        let resume = match header.resume {
            None => None,
            Some(r) => {
                let best = match r.best_step {
                    Some(step) => Some((take_model("best.")?, step)),
                    None => None,
                };
                let mut optimizer = OptimizerState::new(model.named_tensors());
                for (i, name) in optimizer.names.clone().iter().enumerate() {
                    for (which, store) in [("m", &mut optimizer.m), ("v", &mut optimizer.v)] {
                        let key = format!("adam.{which}.{name}");
                        let t = arrays.remove(key.as_str()).ok_or_else(|| CheckpointError::MissingTensor(key.clone()))?;
                        if t.shape() != store[i].shape() {
                            return Err(CheckpointError::Shape { name: key, expected: store[i].shape().to_vec(), found: t.shape().to_vec() });
                        }
                        store[i] = t;
                    }
                }
                optimizer.step = r.optimizer_step;
                let pos = |s: &str| s.parse::<u128>().map_err(|_| CheckpointError::Resume(format!("bad stream position {s:?}")));
                Some(ResumeState {
                    epoch: r.epoch,
                    batch: r.batch,
                    seed: r.seed,
                    word_pos: pos(&r.word_pos)?,
                    epoch_word_pos: r.epoch_word_pos.as_deref().map(pos).transpose()?,
                    optimizer,
                    best,
                    evals_since_best: r.evals_since_best,
                    last_eval_step: r.last_eval_step,
                })
            }
        };
        Ok(Self { model, config: header.train_config, step: header.step, best_val_ap: header.best_val_ap, resume })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }

    /// The same checkpoint without resume state: parameters and metadata only.
    pub fn without_resume(&self) -> Self {
        Self { resume: None, ..self.clone() }
    }
}
