//! Parameter checkpoint file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! u64            header length N in bytes
//! N bytes        JSON header
//! ...            raw f64 data, tensors back to back
//! ```
//!
//! The header maps each tensor name to `{"shape": [...], "offset": bytes}`
//! where `offset` is relative to the start of the data section. A reserved
//! `"__metadata__"` key holds a string → string map (the run config lives
//! there). Keys are written in sorted order and tensors in insertion order,
//! so reading and re-writing a file reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    shape: Vec<usize>,
    offset: u64,
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut out: W) -> Result<()> {
    let mut header = serde_json::Map::new();
    if !ckpt.metadata.is_empty() {
        header.insert(METADATA_KEY.into(), serde_json::to_value(&ckpt.metadata)?);
    }
    let mut offset = 0u64;
    for (name, t) in &ckpt.tensors {
        if name == METADATA_KEY {
            return Err(Error::Checkpoint(format!("reserved tensor name {name:?}")));
        }
        let entry = Entry { shape: t.shape().to_vec(), offset };
        if header.insert(name.clone(), serde_json::to_value(entry)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name:?}")));
        }
        offset += 8 * t.numel() as u64;
    }
    let header = serde_json::to_vec(&header)?;
    let io = |e| Error::io("<checkpoint stream>", e);
    out.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&header).map_err(io)?;
    for (_, t) in &ckpt.tensors {
        for v in t.data() {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint> {
    let io = |e| Error::io("<checkpoint stream>", e);
    let mut len = [0u8; 8];
    input.read_exact(&mut len).map_err(io)?;
    let len = u64::from_le_bytes(len);
    if len > (1 << 30) {
        return Err(Error::Checkpoint(format!("implausible header length {len}")));
    }
    let mut header = vec![0u8; len as usize];
    input.read_exact(&mut header).map_err(io)?;
    let mut data = Vec::new();
    input.read_to_end(&mut data).map_err(io)?;

    let mut header: serde_json::Map<String, serde_json::Value> = serde_json::from_slice(&header)?;
    let metadata = match header.remove(METADATA_KEY) {
        Some(v) => serde_json::from_value(v)?,
        None => BTreeMap::new(),
    };
    let mut entries: Vec<(String, Entry)> = header
        .into_iter()
        .map(|(k, v)| Ok((k, serde_json::from_value(v)?)))
        .collect::<Result<_>>()?;
    entries.sort_by_key(|(_, e)| e.offset);

    let mut expected_offset = 0u64;
    let mut tensors = Vec::with_capacity(entries.len());
    for (name, entry) in entries {
        if entry.offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "{name}: offset {} leaves a gap or overlap (expected {expected_offset})",
                entry.offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 8 * numel;
        let bytes = data
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: data truncated")))?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push((name, Tensor::new(&entry.shape, values)?));
        expected_offset = end as u64;
    }
    if expected_offset as usize != data.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            data.len() - expected_offset as usize
        )));
    }
    Ok(Checkpoint { metadata, tensors })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(ckpt, BufWriter::new(file))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut metadata = BTreeMap::new();
        metadata.insert("config".into(), "{\"seed\":1}".into());
        Checkpoint {
            metadata,
            tensors: vec![
                ("zeta".into(), Tensor::new(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap()),
                ("alpha".into(), Tensor::new(&[3], vec![0.1, 0.2, 1e300]).unwrap()),
            ],
        }
    }

    #[test]
    fn byte_exact_round_trip() {
        let mut bytes = Vec::new();
        write_checkpoint(&sample(), &mut bytes).unwrap();
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, sample());
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn rejects_truncated_data() {
        let mut bytes = Vec::new();
        write_checkpoint(&sample(), &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(read_checkpoint(bytes.as_slice()).is_err());
    }
}
