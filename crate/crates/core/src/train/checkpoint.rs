//! Binary checkpoints.
//!
//! ```text
//! "ITTC" | u32 version | u64 header length | header JSON | payloads
//! ```
//!
//! All integers and tensor elements are little-endian. The header lists every
//! tensor with its byte offset (relative to the payload start), length and
//! CRC-32; payloads are contiguous and in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::optim::OptimizerState;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"ITTC";
pub const VERSION: u32 = 1;
const PREFIX: usize = 4 + 4 + 8;
const MOMENT_PREFIXES: [&str; 2] = ["optim.m.", "optim.v."];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub model: ModelConfig,
    /// The run that produced the weights, when saved by the trainer.
    pub run: Option<RunConfig>,
    /// Optimizer step count; moments appear in `tensors` as `optim.m.*`/`optim.v.*`.
    pub optimizer_step: Option<u64>,
    pub train_step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<F: Scalar> {
    pub model: Model<F>,
    pub run: Option<RunConfig>,
    pub optimizer: Option<OptimizerState<F>>,
    pub train_step: u64,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn new(model: Model<F>) -> Self {
        Checkpoint {
            model,
            run: None,
            optimizer: None,
            train_step: 0,
        }
    }
}

pub fn encode<F: Scalar>(ckpt: &Checkpoint<F>) -> Vec<u8> {
    let mut named: Vec<(String, &Tensor<F>)> = ckpt.model.params.flatten();
    if let Some(opt) = &ckpt.optimizer {
        let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
        for (prefix, moments) in MOMENT_PREFIXES.iter().zip([&opt.m, &opt.v]) {
            for (name, t) in names.iter().zip(moments) {
                named.push((format!("{prefix}{name}"), t));
            }
        }
    }
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(named.len());
    for (name, t) in named {
        let offset = payload.len() as u64;
        for &x in t.data() {
            x.write_le(&mut payload);
        }
        tensors.push(TensorEntry {
            name,
            dtype: F::DTYPE,
            shape: t.shape().to_vec(),
            offset,
            length: payload.len() as u64 - offset,
            crc32: crc32fast::hash(&payload[offset as usize..]),
        });
    }
    let header = Header {
        model: ckpt.model.config.clone(),
        run: ckpt.run.clone(),
        optimizer_step: ckpt.optimizer.as_ref().map(|o| o.step),
        train_step: ckpt.train_step,
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREFIX + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Parses and checks the fixed prefix and header; returns the header and payload.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < PREFIX {
        return Err(bad(format!("file of {} bytes is too short", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = &bytes[PREFIX..];
    if header_len > rest.len() as u64 {
        return Err(bad(format!(
            "header length {header_len} exceeds remaining {} bytes",
            rest.len()
        )));
    }
    let (json, payload) = rest.split_at(header_len as usize);
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header JSON: {e}")))?;
    let mut expected = 0u64;
    for e in &header.tensors {
        if e.offset != expected {
            return Err(bad(format!(
                "tensor {} at offset {} but previous data ends at {expected}",
                e.name, e.offset
            )));
        }
        let numel = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| bad(format!("tensor {} shape overflows", e.name)))?;
        if numel.checked_mul(e.dtype.size() as u64) != Some(e.length) {
            return Err(bad(format!(
                "tensor {} length {} does not match shape {:?} of {:?}",
                e.name, e.length, e.shape, e.dtype
            )));
        }
        expected = e
            .offset
            .checked_add(e.length)
            .ok_or_else(|| bad(format!("tensor {} extent overflows", e.name)))?;
    }
    if expected != payload.len() as u64 {
        return Err(bad(format!(
            "manifest covers {expected} payload bytes, file has {}",
            payload.len()
        )));
    }
    Ok((header, payload))
}

fn read_tensor<F: Scalar>(e: &TensorEntry, payload: &[u8]) -> Result<Tensor<F>> {
    let bytes = &payload[e.offset as usize..(e.offset + e.length) as usize];
    let crc = crc32fast::hash(bytes);
    if crc != e.crc32 {
        return Err(bad(format!("tensor {} checksum {crc:08x}, expected {:08x}", e.name, e.crc32)));
    }
    let data: Vec<F> = match e.dtype {
        d if d == F::DTYPE => bytes.chunks_exact(d.size()).map(F::read_le).collect(),
        DType::F32 => bytes.chunks_exact(4).map(|c| F::of(f32::read_le(c) as f64)).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|c| F::of(f64::read_le(c))).collect(),
    };
    Tensor::new(&e.shape, data)
}

pub fn decode<F: Scalar>(bytes: &[u8]) -> Result<Checkpoint<F>> {
    let (header, payload) = read_header(bytes)?;
    let mut params = Vec::new();
    let mut moments: [Vec<(String, Tensor<F>)>; 2] = [Vec::new(), Vec::new()];
    for e in &header.tensors {
        let t = read_tensor(e, payload)?;
        match MOMENT_PREFIXES.iter().position(|p| e.name.starts_with(p)) {
            Some(k) => moments[k].push((e.name[MOMENT_PREFIXES[k].len()..].to_string(), t)),
            None => params.push((e.name.clone(), t)),
        }
    }
    let params = ModelParams::from_named(&header.model, params).map_err(|e| bad(e.to_string()))?;
    let optimizer = match header.optimizer_step {
        None => None,
        Some(step) => {
            let [m, v] = moments;
            let order = |mut xs: Vec<(String, Tensor<F>)>| -> Result<Vec<Tensor<F>>> {
                let named = ModelParams::from_named(&header.model, std::mem::take(&mut xs))
                    .map_err(|e| bad(format!("optimizer moments: {e}")))?;
                Ok(named.flatten().into_iter().map(|(_, t)| t.clone()).collect())
            };
            Some(OptimizerState {
                step,
                m: order(m)?,
                v: order(v)?,
            })
        }
    };
    let model = Model::from_params(header.model, params).map_err(|e| bad(e.to_string()))?;
    Ok(Checkpoint {
        model,
        run: header.run,
        optimizer,
        train_step: header.train_step,
    })
}

/// Writes atomically: a temporary sibling file is renamed over `path`.
pub fn save_checkpoint<F: Scalar>(ckpt: &Checkpoint<F>, path: &Path) -> Result<()> {
    let bytes = encode(ckpt);
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
