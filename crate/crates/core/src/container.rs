//! Binary container shared by datasets and checkpoints:
//!
//! ```text
//! "INODELAB" | u32 LE header length | JSON header | f64 LE payload
//! ```
//!
//! The header always carries `kind`, `version` and `payload_len`.

use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"INODELAB";

pub fn write(path: &Path, kind: &str, version: u32, header: Value, payload: &[f64]) -> Result<()> {
    let mut header = match header {
        Value::Object(m) => m,
        _ => return Err(Error::Format { path: path.into(), msg: "header must be an object".into() }),
    };
    header.insert("kind".into(), json!(kind));
    header.insert("version".into(), json!(version));
    header.insert("payload_len".into(), json!(payload.len()));
    let header_bytes = serde_json::to_vec(&Value::Object(header))
        .map_err(|e| Error::Format { path: path.into(), msg: e.to_string() })?;

    let mut buf = Vec::with_capacity(12 + header_bytes.len() + 8 * payload.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path, kind: &str, version: u32) -> Result<(Value, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.into())
        } else {
            Error::io(path, e)
        }
    })?;
    let fmt = |msg: String| Error::Format { path: path.into(), msg };
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(fmt("bad magic or truncated preamble".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err(fmt("truncated header".into()));
    }
    let header: Value = serde_json::from_slice(&bytes[12..12 + hlen]).map_err(|e| fmt(format!("header: {e}")))?;
    let found_kind = header.get("kind").and_then(Value::as_str).unwrap_or("");
    if found_kind != kind {
        return Err(fmt(format!("expected a {kind} file, found `{found_kind}`")));
    }
    let found = header.get("version").and_then(Value::as_u64).unwrap_or(0) as u32;
    if found != version {
        return Err(Error::Version { path: path.into(), expected: version, found });
    }
    let n = header
        .get("payload_len")
        .and_then(Value::as_u64)
        .ok_or_else(|| fmt("header lacks payload_len".into()))? as usize;
    let body = &bytes[12 + hlen..];
    if body.len() != 8 * n {
        return Err(fmt(format!("payload holds {} bytes, expected {}", body.len(), 8 * n)));
    }
    let payload = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header, payload))
}
