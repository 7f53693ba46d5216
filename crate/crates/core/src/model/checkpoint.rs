//! Checkpoint files.
//!
//! Layout: the 8-byte magic `PKLBCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then raw
//! little-endian tensor blocks. The header holds the model config, the
//! element type, a `{name, shape, offset}` index into the data section
//! (offsets in bytes), and optionally optimizer and training state. Adam
//! moments are stored as tensors named `adam.m/<param>` and `adam.v/<param>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::gpt::{Gpt, ModelConfig};
use super::linalg::Real;
use super::optim::{AdamW, OptimState};
use super::ModelError;

const MAGIC: &[u8; 8] = b"PKLBCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position in the training schedule, enough to resume exactly.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    /// Next minibatch within `epoch`.
    pub cursor: usize,
    pub best_val: Option<f64>,
    pub prev_val: Option<f64>,
    pub regressions: usize,
    pub val_history: Vec<f64>,
    pub stopped: bool,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: Gpt<T>,
    pub optim: Option<OptimState<T>>,
    pub train_state: Option<TrainState>,
    pub train_config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimHeader {
    step: u64,
    hyper: AdamW,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    optim: Option<OptimHeader>,
    train_state: Option<TrainState>,
    train_config: Option<serde_json::Value>,
}

fn ckpt_err(path: &Path, message: impl Into<String>) -> ModelError {
    ModelError::Checkpoint { path: path.to_path_buf(), message: message.into() }
}

/// Writes atomically via a temporary file in the same directory.
pub fn save_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<(), ModelError> {
    let model = &ckpt.model;
    let mut tensors = Vec::new();
    let mut data = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, values: &[T]| {
        tensors.push(TensorEntry { name, shape, offset: data.len() });
        for &x in values {
            x.write_le(&mut data);
        }
    };
    for p in model.param_info() {
        push(p.name.clone(), p.shape.clone(), &model.params[p.range()]);
    }
    if let Some(o) = &ckpt.optim {
        for p in model.param_info() {
            push(format!("adam.m/{}", p.name), p.shape.clone(), &o.m[p.range()]);
            push(format!("adam.v/{}", p.name), p.shape.clone(), &o.v[p.range()]);
        }
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE.into(),
        config: *model.config(),
        tensors,
        optim: ckpt.optim.as_ref().map(|o| OptimHeader { step: o.step, hyper: o.hyper }),
        train_state: ckpt.train_state.clone(),
        train_config: ckpt.train_config.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let io = |source| ModelError::Io { path: path.to_path_buf(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(MAGIC).map_err(io)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    f.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    f.write_all(&header).map_err(io)?;
    f.write_all(&data).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}

fn read_block<T: Real>(data: &[u8], offset: usize, len: usize, bytes: usize, f64_src: bool) -> Option<Vec<T>> {
    let block = data.get(offset..offset.checked_add(len.checked_mul(bytes)?)?)?;
    Some(
        block
            .chunks_exact(bytes)
            .map(|c| {
                let x = if f64_src { f64::read_le(c) } else { f64::from(f32::read_le(c)) };
                T::lit(x)
            })
            .collect(),
    )
}

/// Loads a checkpoint, converting the stored element type to `T`.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ckpt_err(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(path, format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let hbytes = bytes.get(20..20usize.saturating_add(hlen)).ok_or_else(|| ckpt_err(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(hbytes).map_err(|e| ckpt_err(path, format!("bad header: {e}")))?;
    let data = &bytes[20 + hlen..];
    let (elem, f64_src) = match header.dtype.as_str() {
        "f64" => (8, true),
        "f32" => (4, false),
        other => return Err(ckpt_err(path, format!("unknown dtype {other}"))),
    };
    let find = |name: &str, shape: &[usize]| -> Result<Vec<T>, ModelError> {
        let e = header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| ckpt_err(path, format!("missing tensor {name}")))?;
        if e.shape != shape {
            return Err(ckpt_err(path, format!("tensor {name} has shape {:?}, expected {shape:?}", e.shape)));
        }
        read_block(data, e.offset, shape.iter().product(), elem, f64_src)
            .ok_or_else(|| ckpt_err(path, format!("tensor {name} runs past the end of the file")))
    };
    let mut model = Gpt::<T>::zeros(header.config)?;
    let infos = model.param_info().to_vec();
    for p in &infos {
        let values = find(&p.name, &p.shape)?;
        model.params[p.range()].copy_from_slice(&values);
    }
    let optim = match header.optim {
        Some(h) => {
            let mut o = OptimState::new(model.num_params(), h.hyper);
            o.step = h.step;
            for p in &infos {
                o.m[p.range()].copy_from_slice(&find(&format!("adam.m/{}", p.name), &p.shape)?);
                o.v[p.range()].copy_from_slice(&find(&format!("adam.v/{}", p.name), &p.shape)?);
            }
            Some(o)
        }
        None => None,
    };
    Ok(Checkpoint { model, optim, train_state: header.train_state, train_config: header.train_config })
}
