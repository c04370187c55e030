//! Binary model checkpoints.
//!
//! Layout: the 8-byte magic `ATNLCKPT`, a little-endian `u32` format
//! version, a `u64` header length, a JSON header describing the model and
//! every tensor, then the raw little-endian bits of all tensors in header
//! order. Loading reproduces the saved model bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneConfig, InsertionPlan, Model, ModelError};
use crate::nn::ParamStore;
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 8] = b"ATNLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint holds {found} values, expected {expected}")]
    DType { found: String, expected: &'static str },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    buffer: bool,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: BackboneConfig,
    plan: String,
    tensors: Vec<TensorEntry>,
}

fn width<T: Element>() -> usize {
    std::mem::size_of::<T>()
}

pub fn write_checkpoint<T: Element>(model: &Model<T>, mut w: impl Write) -> Result<()> {
    let tensors: Vec<(bool, &String, &Tensor<T>)> = model
        .store
        .params
        .iter()
        .map(|(k, v)| (false, k, v))
        .chain(model.store.buffers.iter().map(|(k, v)| (true, k, v)))
        .collect();
    let header = Header {
        dtype: T::DTYPE.to_string(),
        config: model.config.clone(),
        plan: model.plan.to_string(),
        tensors: tensors
            .iter()
            .map(|(buffer, name, t)| TensorEntry {
                name: (*name).clone(),
                buffer: *buffer,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let n = width::<T>();
    let mut bytes = Vec::new();
    for (_, _, t) in &tensors {
        bytes.clear();
        for &v in t.data() {
            bytes.extend_from_slice(&v.to_bits_u64().to_le_bytes()[..n]);
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_checkpoint<T: Element>(mut r: impl Read) -> Result<Model<T>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(CheckpointError::Corrupt(format!("header length {len}")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    if header.dtype != T::DTYPE {
        return Err(CheckpointError::DType {
            found: header.dtype,
            expected: T::DTYPE,
        });
    }
    let plan: InsertionPlan = header.plan.parse()?;
    let n = width::<T>();
    let mut store = ParamStore::new();
    for e in &header.tensors {
        let count: usize = e.shape.iter().product();
        let mut raw = vec![0u8; count * n];
        r.read_exact(&mut raw)?;
        let data: Vec<T> = raw
            .chunks_exact(n)
            .map(|c| {
                let mut b = [0u8; 8];
                b[..n].copy_from_slice(c);
                T::from_bits_u64(u64::from_le_bytes(b))
            })
            .collect();
        let t = Tensor::new(&e.shape, data).map_err(|err| CheckpointError::Corrupt(err.to_string()))?;
        if e.buffer {
            store.buffers.insert(e.name.clone(), t);
        } else {
            store.params.insert(e.name.clone(), t);
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    header.config.validate()?;
    plan.validate(&header.config)?;
    // the stored tensors must be exactly those a fresh model would have
    let fresh = Model::<T>::new(header.config.clone(), plan.clone(), 0)?;
    let shapes = |s: &ParamStore<T>| -> Vec<(String, Vec<usize>)> {
        s.params
            .iter()
            .chain(s.buffers.iter())
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    };
    if shapes(&fresh.store) != shapes(&store) {
        return Err(CheckpointError::Corrupt(
            "tensor names or shapes do not match the model".into(),
        ));
    }
    Ok(Model {
        config: header.config,
        plan,
        store,
    })
}

pub fn save<T: Element>(model: &Model<T>, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load<T: Element>(path: &Path) -> Result<Model<T>> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}
