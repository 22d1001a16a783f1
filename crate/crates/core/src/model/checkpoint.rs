//! Checkpoint container: magic `GS4M`, a `u32` format version, the model
//! config as a length-prefixed JSON document, then named tensors.
//!
//! Every integer is little-endian. A tensor record is `u32` name length,
//! UTF-8 name, `u32` rank, `rank` x `u64` dims, then the values as `f64`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ClsHead, GraphS4Model, ModelConfig};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GS4M";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &GraphS4Model, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&model.config)?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    let mut count = 0u32;
    model.visit_params(&mut |_, _, _| count += 1);
    w.write_all(&count.to_le_bytes())?;
    let mut res = Ok(());
    model.visit_params(&mut |name, shape, data| {
        if res.is_err() {
            return;
        }
        res = write_tensor(&mut w, name, shape, data);
    });
    res?;
    w.flush()?;
    Ok(())
}

fn write_tensor<W: Write>(w: &mut W, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for d in shape {
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<GraphS4Model> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let config: ModelConfig = serde_json::from_slice(&cfg_bytes)?;
    config.validate()?;
    let count = read_u32(&mut r)?;
    let mut tensors = HashMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor {name} has implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let mut raw = vec![0u8; len * 8];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        if tensors.insert(name.clone(), Tensor { shape, data }).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    let mut model = GraphS4Model::init(&config, 0)?;
    if tensors.contains_key("cls_head.w") {
        let f = config.num_nodes * config.channels;
        model.cls_head = Some(ClsHead { w: Array2::zeros((2, f)), b: Array1::zeros(2) });
    }
    let mut res = Ok(());
    model.visit_params_mut(&mut |name, shape, data| {
        if res.is_err() {
            return;
        }
        res = match tensors.remove(name) {
            None => Err(Error::Format(format!("checkpoint is missing tensor {name}"))),
            Some(t) if t.shape != shape => {
                Err(Error::Format(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape)))
            }
            Some(t) => {
                data.copy_from_slice(&t.data);
                Ok(())
            }
        };
    });
    res?;
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {name}")));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &GraphS4Model, path: &Path) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<GraphS4Model> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
