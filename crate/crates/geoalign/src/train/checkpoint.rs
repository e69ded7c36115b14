//! Checkpoint binary format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"GACP"
//! version u32
//! meta    u64 length + JSON bytes (configs, vocab, seed, progress counters)
//! tensors u64 count, then per tensor:
//!         u16 name length + UTF-8 name, u32 ndim, u64 dims..., f32 data...
//! opt     u8 flag; when 1: u64 step, then per tensor in the same order:
//!         f32 first moments..., f32 second moments...
//! ```
//!
//! Tensor values are stored as f32. The training loop keeps its live state
//! snapped to f32, so save → load → save is byte-identical and a resumed
//! run reproduces the next step bitwise. All randomness is derived from
//! `(seed, stream name, index)`, so the seed plus the progress counters in
//! the meta block fully restore the RNG position.

use std::collections::{BTreeMap, HashMap};
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::encoders::{DualEncoderParams, TextEncoderConfig, TokenVocab, VisionEncoderConfig};
use crate::losses::Stage;

use super::optim::OptimizerState;
use super::TrainError;

const MAGIC: &[u8; 4] = b"GACP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub vision: VisionEncoderConfig,
    pub text: TextEncoderConfig,
    /// Vocabulary words in id order (reserved ids are implicit).
    pub vocab_words: Vec<String>,
    /// Stage this checkpoint was produced by.
    pub stage: Stage,
    pub seed: u64,
    /// Epochs completed within `stage`.
    pub epochs_done: usize,
    /// Optimizer steps completed within `stage`.
    pub steps_done: usize,
}

impl CheckpointMeta {
    pub fn vocab(&self) -> TokenVocab {
        TokenVocab::from_words(self.vocab_words.clone())
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: DualEncoderParams,
    pub optimizer: Option<OptimizerState>,
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn corrupt(path: &Path, msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint {
        path: path.to_path_buf(),
        message: msg.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);

        let named = self.params.named();
        out.extend_from_slice(&(named.len() as u64).to_le_bytes());
        for (name, tensor) in &named {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &dim in tensor.shape() {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }

        match &self.optimizer {
            None => out.push(0),
            Some(state) => {
                out.push(1);
                out.extend_from_slice(&state.step.to_le_bytes());
                for (name, _) in &named {
                    for moments in [&state.first[name], &state.second[name]] {
                        for &v in moments.iter() {
                            out.extend_from_slice(&(v as f32).to_le_bytes());
                        }
                    }
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| io_err(path, e))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, TrainError> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic)
            .map_err(|_| corrupt(path, "truncated magic"))?;
        if &magic != MAGIC {
            return Err(corrupt(path, "bad magic, not a checkpoint"));
        }
        let version = read_u32(&mut cur, path)?;
        if version != VERSION {
            return Err(corrupt(path, format!("unsupported version {version}")));
        }
        let meta_len = read_u64(&mut cur, path)? as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        cur.read_exact(&mut meta_bytes)
            .map_err(|_| corrupt(path, "truncated meta"))?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| corrupt(path, format!("bad meta JSON: {e}")))?;

        let count = read_u64(&mut cur, path)? as usize;
        let mut table: HashMap<String, Tensor> = HashMap::with_capacity(count);
        let mut order: Vec<String> = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u16(&mut cur, path)? as usize;
            let mut name = vec![0u8; name_len];
            cur.read_exact(&mut name)
                .map_err(|_| corrupt(path, "truncated tensor name"))?;
            let name = String::from_utf8(name)
                .map_err(|_| corrupt(path, "tensor name is not UTF-8"))?;
            let ndim = read_u32(&mut cur, path)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut cur, path)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(read_f32(&mut cur, path)? as f64);
            }
            let tensor = Tensor::from_vec(shape, data)
                .map_err(|e| corrupt(path, format!("tensor {name}: {e}")))?;
            order.push(name.clone());
            table.insert(name, tensor);
        }
        let params = DualEncoderParams::from_named(&meta.vision, &meta.text, &table)
            .map_err(|e| corrupt(path, e.to_string()))?;

        let mut flag = [0u8; 1];
        cur.read_exact(&mut flag)
            .map_err(|_| corrupt(path, "truncated optimizer flag"))?;
        let optimizer = if flag[0] == 1 {
            let step = read_u64(&mut cur, path)?;
            let mut first = BTreeMap::new();
            let mut second = BTreeMap::new();
            for name in &order {
                let numel = table[name].numel();
                for target in [&mut first, &mut second] {
                    let mut data = Vec::with_capacity(numel);
                    for _ in 0..numel {
                        data.push(read_f32(&mut cur, path)? as f64);
                    }
                    target.insert(name.clone(), data);
                }
            }
            Some(OptimizerState {
                step,
                first,
                second,
            })
        } else {
            None
        };
        if cur.position() != bytes.len() as u64 {
            return Err(corrupt(path, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            meta,
            params,
            optimizer,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn read_u16(cur: &mut Cursor<&[u8]>, path: &Path) -> Result<u16, TrainError> {
    let mut b = [0u8; 2];
    cur.read_exact(&mut b)
        .map_err(|_| corrupt(path, "truncated u16"))?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(cur: &mut Cursor<&[u8]>, path: &Path) -> Result<u32, TrainError> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b)
        .map_err(|_| corrupt(path, "truncated u32"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(cur: &mut Cursor<&[u8]>, path: &Path) -> Result<u64, TrainError> {
    let mut b = [0u8; 8];
    cur.read_exact(&mut b)
        .map_err(|_| corrupt(path, "truncated u64"))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32(cur: &mut Cursor<&[u8]>, path: &Path) -> Result<f32, TrainError> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b)
        .map_err(|_| corrupt(path, "truncated f32"))?;
    Ok(f32::from_le_bytes(b))
}
