//! Binary checkpoints: `MSUN`, u32 version, u32-length UTF-8 network
//! description, then every parameter as a little-endian f32 in layout order.

use std::path::Path;

use super::graph::{GraphConfig, NetworkGraph};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSUN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(graph: &NetworkGraph) -> Vec<u8> {
    let text = format!("{}param_count={}\n", graph.config.to_text(), graph.params.len());
    let mut out = Vec::with_capacity(12 + text.len() + 4 * graph.params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for &p in &graph.params {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NetworkGraph> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "not a network checkpoint"));
    }
    let u32_at = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::format(bytes.len() as u64, "truncated header"))
    };
    let version = u32_at(4)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let text_len = u32_at(8)? as usize;
    let text = bytes
        .get(12..12 + text_len)
        .ok_or_else(|| Error::format(bytes.len() as u64, "truncated network description"))?;
    let text = std::str::from_utf8(text).map_err(|e| Error::format(12 + e.valid_up_to() as u64, "description is not UTF-8"))?;
    let mut count = None;
    let mut cfg_text = String::new();
    for line in text.lines() {
        match line.strip_prefix("param_count=") {
            Some(v) => count = Some(v.parse::<usize>().map_err(|_| Error::format(12, "bad parameter count"))?),
            None => {
                cfg_text.push_str(line);
                cfg_text.push('\n');
            }
        }
    }
    let config = GraphConfig::from_text(&cfg_text)?;
    let mut graph = NetworkGraph::build(config)?;
    let n = graph.params.len();
    if count != Some(n) {
        return Err(Error::format(12, format!("description declares {count:?} parameters, network has {n}")));
    }
    let start = 12 + text_len;
    let want = start + 4 * n;
    if bytes.len() < want {
        return Err(Error::format(bytes.len() as u64, format!("truncated parameters: expected {want} bytes")));
    }
    if bytes.len() > want {
        return Err(Error::format(want as u64, "trailing bytes after parameters"));
    }
    for (i, p) in graph.params.iter_mut().enumerate() {
        let off = start + 4 * i;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(off as u64, "non-finite parameter"));
        }
        *p = v as f64;
    }
    Ok(graph)
}

pub fn save_checkpoint(graph: &NetworkGraph, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(graph))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkGraph> {
    decode_checkpoint(&std::fs::read(path)?)
}
