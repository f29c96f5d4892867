//! Checkpoint container: a JSON header (config echo, extra metadata, entry
//! table) followed by a little-endian float32 payload of all named parameter
//! arrays. Writes are atomic (write to a temp file, then rename).

use crate::autodiff::Tensor;
use crate::model::ModelConfig;
use crate::nn::ParamStore;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PT3D";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    extra: serde_json::Value,
    entries: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    rows: usize,
    cols: usize,
}

pub fn save(
    path: &Path,
    config: &ModelConfig,
    params: &ParamStore,
    extra: serde_json::Value,
) -> io::Result<()> {
    let entries: Vec<Entry> = params
        .iter()
        .map(|(name, t)| Entry {
            name: name.clone(),
            rows: t.rows(),
            cols: t.cols(),
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: config.clone(),
        extra,
        entries,
    })?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in params.iter() {
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn load(path: &Path) -> io::Result<(ModelConfig, ParamStore, serde_json::Value)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic at offset 0)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16 + header_len;
    if bytes.len() < header_end {
        return Err(bad(format!(
            "truncated header: need {header_end} bytes, file has {}",
            bytes.len()
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| bad(format!("bad header JSON at offset 16: {e}")))?;

    let mut params = ParamStore::new();
    let mut at = header_end;
    for e in &header.entries {
        let n = e.rows * e.cols;
        let end = at + n * 4;
        if bytes.len() < end {
            return Err(bad(format!(
                "truncated payload for {} at byte offset {at}",
                e.name
            )));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let off = at + i * 4;
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            data.push(v as f64);
        }
        params.insert(&e.name, Tensor::from_vec(e.rows, e.cols, data));
        at = end;
    }
    if at != bytes.len() {
        return Err(bad(format!(
            "trailing {} bytes after payload (offset {at})",
            bytes.len() - at
        )));
    }
    Ok((header.config, params, header.extra))
}

/// FNV-1a content hash of a file, as 16 hex digits.
pub fn content_hash(path: &Path) -> io::Result<String> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(format!("{:016x}", fnv1a(&bytes)))
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
