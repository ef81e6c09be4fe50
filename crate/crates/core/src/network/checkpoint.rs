//! Model checkpoint container.
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"SAGNETCK"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      4     header length L in bytes, u32 little-endian
//! 16      L     UTF-8 JSON header (see `Header`)
//! 16+L    4*P   parameter payload, f32 little-endian, in header order
//! ```
//!
//! The header echoes the network config and the RNG seeds, and lists every
//! parameter with its name, group (`f`, `f_affine`, `c`, `s`), shape and
//! offset (in scalars) into the payload.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{build_model, ModelBundle, ModelSeeds, NetworkError, Result, StageCNNConfig};
use crate::numcore::Scalar;

pub const MAGIC: &[u8; 8] = b"SAGNETCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: StageCNNConfig,
    pub seeds: ModelSeeds,
    pub params: Vec<ParamEntry>,
}

fn corrupt(msg: impl Into<String>) -> NetworkError {
    NetworkError::Config(format!("checkpoint: {}", msg.into()))
}

pub fn write<T: Scalar, W: Write>(model: &ModelBundle<T>, mut out: W) -> std::io::Result<()> {
    let mut offset = 0;
    let params = model
        .params
        .ids()
        .map(|id| {
            let t = model.params.peek(id);
            let entry = ParamEntry {
                name: model.params.name(id).to_string(),
                group: model.groups.group_of(id).to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel();
            entry
        })
        .collect();
    let header = Header {
        config: model.config.clone(),
        seeds: model.seeds,
        params,
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::with_capacity(offset * 4);
    for id in model.params.ids() {
        for &v in model.params.peek(id).data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    out.flush()
}

pub fn read<T: Scalar, R: Read>(mut input: R) -> Result<ModelBundle<T>> {
    let io = |e: std::io::Error| corrupt(e.to_string());
    let mut fixed = [0u8; 16];
    input.read_exact(&mut fixed).map_err(io)?;
    if &fixed[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(fixed[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let len = u32::from_le_bytes(fixed[12..16].try_into().expect("4 bytes")) as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json).map_err(io)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| corrupt(e.to_string()))?;
    let mut payload = Vec::new();
    input.read_to_end(&mut payload).map_err(io)?;

    let mut model = build_model::<T>(&header.config, 0)?;
    model.seeds = header.seeds;
    if header.params.len() != model.params.len() {
        return Err(corrupt(format!(
            "{} parameters listed, config implies {}",
            header.params.len(),
            model.params.len()
        )));
    }
    for entry in &header.params {
        let id = model
            .params
            .find(&entry.name)
            .ok_or_else(|| corrupt(format!("unknown parameter {}", entry.name)))?;
        let t = model.params.get_mut(id);
        if t.shape() != entry.shape.as_slice() {
            return Err(corrupt(format!("{} has shape {:?}, expected {:?}", entry.name, entry.shape, t.shape())));
        }
        let bytes = payload
            .get(entry.offset * 4..(entry.offset + t.numel()) * 4)
            .ok_or_else(|| corrupt(format!("payload truncated at {}", entry.name)))?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(corrupt(format!("non-finite value in {}", entry.name)));
            }
            *dst = T::lit(v as f64);
        }
    }
    Ok(model)
}

pub fn save<T: Scalar>(model: &ModelBundle<T>, path: &std::path::Path) -> std::io::Result<()> {
    let file = std::fs::File::create(path)?;
    write(model, std::io::BufWriter::new(file))
}

pub fn load<T: Scalar>(path: &std::path::Path) -> Result<ModelBundle<T>> {
    let file = std::fs::File::open(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
    read(std::io::BufReader::new(file))
}
