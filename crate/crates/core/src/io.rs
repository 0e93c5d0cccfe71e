//! Binary container shared by datasets and models: a JSON header followed
//! by little-endian float64 blocks.
//!
//! Layout:
//!   bytes 0..4    magic `KLB1`
//!   bytes 4..12   header length `L` as little-endian u64
//!   bytes 12..12+L  UTF-8 JSON header; its `blocks` array lists
//!                   `{ "name": ..., "len": ... }` in file order
//!   remainder     the blocks' f64 values, little-endian, concatenated
//!
//! The header carries all metadata; readers must not assume any field
//! ordering inside it beyond the `blocks` list.

use crate::error::{Error, Result};
use serde_json::{json, Value};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"KLB1";

pub fn write_container(path: &Path, mut header: Value, blocks: &[(&str, &[f64])]) -> Result<()> {
    let block_index: Vec<Value> = blocks
        .iter()
        .map(|(name, data)| json!({ "name": name, "len": data.len() }))
        .collect();
    header
        .as_object_mut()
        .ok_or_else(|| Error::Format("container header must be a JSON object".into()))?
        .insert("blocks".into(), Value::Array(block_index));

    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, data) in blocks {
        for v in *data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(Value, Vec<(String, Vec<f64>)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic (not a KLB1 container)".into()));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Value = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("header JSON: {e}")))?;

    let index = header
        .get("blocks")
        .and_then(|b| b.as_array())
        .ok_or_else(|| Error::Format("header missing field `blocks`".into()))?
        .clone();

    let mut blocks = Vec::with_capacity(index.len());
    for entry in &index {
        let name = entry
            .get("name")
            .and_then(|n| n.as_str())
            .ok_or_else(|| Error::Format("block entry missing field `name`".into()))?
            .to_string();
        let len = entry
            .get("len")
            .and_then(|l| l.as_u64())
            .ok_or_else(|| Error::Format("block entry missing field `len`".into()))? as usize;
        let mut raw = vec![0u8; len * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blocks.push((name, data));
    }
    Ok((header, blocks))
}

pub fn require_field<'a>(header: &'a Value, field: &str) -> Result<&'a Value> {
    header
        .get(field)
        .ok_or_else(|| Error::Format(format!("header missing field `{field}`")))
}

pub fn find_block<'a>(blocks: &'a [(String, Vec<f64>)], name: &str) -> Result<&'a [f64]> {
    blocks
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, d)| d.as_slice())
        .ok_or_else(|| Error::Format(format!("missing block `{name}`")))
}
