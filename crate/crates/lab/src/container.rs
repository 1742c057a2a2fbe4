//! Tensor container: a text header followed by little-endian `f32` payload.
//!
//! ```text
//! FREEU-TENSORS 1\n
//! <header byte length>\n
//! <pretty JSON header>\n
//! <payload>
//! ```
//!
//! The header carries the format version, the concat-order flag, free-form
//! metadata and the tensor index. Offsets are relative to the payload start,
//! ascending and contiguous.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use freeu_core::tensor::Tensor;
use freeu_core::unet::CONCAT_ORDER;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Tensors in container order.
pub type Named = Vec<(String, Tensor)>;

pub const MAGIC: &str = "FREEU-TENSORS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header<M> {
    pub format_version: u32,
    pub concat_order: String,
    pub meta: M,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode<M: Serialize>(meta: &M, tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut index = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        let length = 4 * t.numel() as u64;
        index.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            length,
        });
        offset += length;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        concat_order: CONCAT_ORDER.to_string(),
        meta,
        tensors: index,
    };
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    let mut out = Vec::with_capacity(json.len() + 64 + offset as usize);
    out.extend_from_slice(format!("{MAGIC} {FORMAT_VERSION}\n{}\n", json.len()).as_bytes());
    out.extend_from_slice(json.as_bytes());
    out.push(b'\n');
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> LabError {
    LabError::Container(msg.into())
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("truncated preamble"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| bad("preamble is not UTF-8"))
}

pub fn decode<M: DeserializeOwned>(bytes: &[u8]) -> Result<(Header<M>, Named)> {
    let mut pos = 0;
    let magic = take_line(bytes, &mut pos)?;
    if magic != format!("{MAGIC} {FORMAT_VERSION}") {
        return Err(bad(format!("unexpected magic line {magic:?}")));
    }
    let len: usize = take_line(bytes, &mut pos)?
        .parse()
        .map_err(|_| bad("header length is not a number"))?;
    let json_end = pos
        .checked_add(len)
        .filter(|&e| e < bytes.len() && bytes[e] == b'\n')
        .ok_or_else(|| bad("header length does not match"))?;
    let header: Header<M> = serde_json::from_slice(&bytes[pos..json_end])
        .map_err(|e| bad(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {}", header.format_version)));
    }
    if header.concat_order != CONCAT_ORDER {
        return Err(bad(format!("unsupported concat order {:?}", header.concat_order)));
    }
    let payload = &bytes[json_end + 1..];
    let mut expected = 0u64;
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let numel: usize = e.shape.iter().product();
        if e.offset != expected || e.length != 4 * numel as u64 {
            return Err(bad(format!("index entry {} is not contiguous", e.name)));
        }
        let end = (e.offset + e.length) as usize;
        let raw = payload
            .get(e.offset as usize..end)
            .ok_or_else(|| bad(format!("payload too short for {}", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        expected = e.offset + e.length;
    }
    if payload.len() as u64 != expected {
        return Err(bad(format!(
            "payload has {} bytes, index covers {expected}",
            payload.len()
        )));
    }
    Ok((header, out))
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| bad(format!("{} has no file name", path.display())))?;
    static NEXT: AtomicU64 = AtomicU64::new(0);
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}.{}",
        name.to_string_lossy(),
        std::process::id(),
        NEXT.fetch_add(1, Ordering::Relaxed)
    ));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        LabError::io(path, e)
    })
}

pub fn save<M: Serialize>(path: &Path, meta: &M, tensors: &[(String, Tensor)]) -> Result<()> {
    write_atomic(path, &encode(meta, tensors))
}

pub fn load<M: DeserializeOwned>(path: &Path) -> Result<(Header<M>, Named)> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode(&bytes)
}
