//! Preprocessed dataset cache: a versioned binary file holding the id maps
//! and sequences, stamped with the SHA-256 of its payload.

use std::fs;
use std::path::Path;

use muffin_core::data::SequenceDataset;
use sha2::{Digest, Sha256};

use crate::codec::{Reader, Writer};
use crate::error::{bail, Error, Result};

pub const MAGIC: &[u8; 8] = b"MUFFDATA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CachedDataset {
    pub dataset: SequenceDataset,
    /// k of the k-core filter the log went through.
    pub min_core: usize,
    /// Hex SHA-256 of the payload.
    pub hash: String,
}

fn encode_payload(ds: &SequenceDataset, min_core: usize) -> Vec<u8> {
    let mut w = Writer::default();
    w.len(min_core);
    for list in [&ds.users, &ds.items, &ds.dropped_users] {
        w.len(list.len());
        list.iter().for_each(|s| w.str(s));
    }
    w.len(ds.sequences.len());
    for seq in &ds.sequences {
        w.len(seq.len());
        seq.iter().for_each(|&i| w.u32(i as u32));
    }
    w.buf
}

pub fn encode(ds: &SequenceDataset, min_core: usize) -> (Vec<u8>, String) {
    let payload = encode_payload(ds, min_core);
    let digest = Sha256::digest(&payload);
    let mut out = Vec::with_capacity(payload.len() + 44);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&digest);
    out.extend_from_slice(&payload);
    (out, hex::encode(digest))
}

pub fn decode(bytes: &[u8]) -> Result<CachedDataset> {
    let mut r = Reader::new(bytes, "dataset cache");
    if r.take(8)? != MAGIC {
        bail!(Data, "not a dataset cache");
    }
    let version = r.u32()?;
    if version != VERSION {
        bail!(Data, "dataset cache version {version}, expected {VERSION}");
    }
    let stored = r.take(32)?;
    let payload = &bytes[44..];
    let digest = Sha256::digest(payload);
    if digest.as_slice() != stored {
        bail!(Data, "dataset cache hash mismatch");
    }
    let mut r = Reader::new(payload, "dataset cache");
    let min_core = r.u64()? as usize;
    let mut lists = Vec::new();
    for _ in 0..3 {
        let n = r.len(8)?;
        lists.push((0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?);
    }
    let n = r.len(8)?;
    let mut sequences = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.len(4)?;
        sequences.push((0..len).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?);
    }
    r.finish()?;
    let dropped_users = lists.pop().unwrap_or_default();
    let items = lists.pop().unwrap_or_default();
    let users = lists.pop().unwrap_or_default();
    if users.len() != sequences.len() {
        bail!(Data, "dataset cache has {} users but {} sequences", users.len(), sequences.len());
    }
    if sequences.iter().flatten().any(|&i| i == 0 || i > items.len()) {
        bail!(Data, "dataset cache references an unknown item");
    }
    let dataset = SequenceDataset { users, items, sequences, dropped_users };
    Ok(CachedDataset { dataset, min_core, hash: hex::encode(digest) })
}

/// Writes the cache and returns its hash.
pub fn save(path: &Path, ds: &SequenceDataset, min_core: usize) -> Result<String> {
    let (bytes, hash) = encode(ds, min_core);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(hash)
}

pub fn load(path: &Path) -> Result<CachedDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn is_cache(path: &Path) -> bool {
    use std::io::Read;
    let mut head = [0u8; 8];
    fs::File::open(path).and_then(|mut f| f.read_exact(&mut head)).is_ok() && &head == MAGIC
}
