//! Binary checkpoint of [`ModelParams`]: magic, version, the model config
//! as JSON, then every tensor with its name, shape and f64 little-endian
//! payload. Loading reproduces the parameters bit for bit.

use std::fs;
use std::path::Path;

use muffin_core::autodiff::Tensor;
use muffin_core::model::{ModelConfig, ModelParams};

use crate::codec::{Reader, Writer};
use crate::error::{bail, Error, Result};

pub const MAGIC: &[u8; 8] = b"MUFFCKPT";
pub const VERSION: u32 = 1;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(&serde_json::to_string(&params.config).expect("config serializes"));
    w.len(params.num_items);
    w.len(params.len());
    for (name, t) in params.entries() {
        w.str(name);
        w.len(t.shape().len());
        t.shape().iter().for_each(|&s| w.len(s));
        t.values().iter().for_each(|&v| w.f64(v));
    }
    w.buf
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::new(bytes, "checkpoint");
    if r.take(8)? != MAGIC {
        bail!(Data, "not a checkpoint");
    }
    let version = r.u32()?;
    if version != VERSION {
        bail!(Data, "checkpoint version {version}, expected {VERSION}");
    }
    let config: ModelConfig = match serde_json::from_str(&r.str()?) {
        Ok(c) => c,
        Err(e) => bail!(Data, "checkpoint config: {e}"),
    };
    let num_items = r.u64()? as usize;
    let count = r.len(8)?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.str()?;
        let ndim = r.len(8)?;
        let shape = (0..ndim).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
        let Some(numel) = numel else {
            bail!(Data, "checkpoint tensor {name} has an overflowing shape");
        };
        if numel.saturating_mul(8) > bytes.len() {
            bail!(Data, "checkpoint tensor {name} is larger than the file");
        }
        let values = (0..numel).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?;
        entries.push((name, Tensor::new(&shape, values)?));
    }
    r.finish()?;
    ModelParams::from_entries(config, num_items, entries).map_err(|e| Error::Data(format!("checkpoint: {}", e.message())))
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}
