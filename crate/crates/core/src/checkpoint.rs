//! Versioned binary checkpoints for trained networks.
//!
//! Layout: magic + version byte, little-endian u32 header length, a JSON
//! header (net spec, parameter count, seed, arbitrary metadata), the raw
//! little-endian f64 parameters, and a trailing FNV-1a checksum over
//! everything before it.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::net::{NetParams, NetSpec};

const MAGIC: &[u8; 8] = b"DSECKPT\x01";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Format version; readers reject anything newer than they know.
    pub version: u32,
    /// What the net is ("denoiser", "predictor", ...). Free-form.
    pub kind: String,
    pub spec: NetSpec,
    pub param_count: usize,
    /// Root seed the training run derived its streams from.
    pub seed: u64,
    /// Side data the owner wants back on load (noise schedule, bounds, ...).
    #[serde(default)]
    pub meta: Value,
}

pub const FORMAT_VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    hash
}

pub fn save<W: Write>(
    mut writer: W,
    kind: &str,
    spec: &NetSpec,
    params: &NetParams,
    seed: u64,
    meta: Value,
) -> Result<()> {
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        kind: kind.to_string(),
        spec: spec.clone(),
        param_count: params.len(),
        seed,
        meta,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization: {e}")))?;

    let mut buf = Vec::with_capacity(MAGIC.len() + 4 + header_json.len() + params.len() * 8 + 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for v in params.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let checksum = fnv1a(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    writer.write_all(&buf)?;
    Ok(())
}

pub fn save_to_path(
    path: &Path,
    kind: &str,
    spec: &NetSpec,
    params: &NetParams,
    seed: u64,
    meta: Value,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    save(std::io::BufWriter::new(file), kind, spec, params, seed, meta)
}

/// Parse a checkpoint from raw bytes. Every length, the version, the
/// declared parameter count, and the checksum are validated before the
/// parameters are accepted; parameter values must be finite.
pub fn load_bytes(bytes: &[u8]) -> Result<(CheckpointHeader, NetParams)> {
    let err = |m: &str| Error::Checkpoint(m.to_string());

    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(err("file too short"));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(err("bad magic"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("eight bytes"));
    if fnv1a(body) != stored {
        return Err(err("checksum mismatch"));
    }

    let mut cursor = MAGIC.len();
    let header_len =
        u32::from_le_bytes(body[cursor..cursor + 4].try_into().expect("four bytes")) as usize;
    cursor += 4;
    if body.len() < cursor + header_len {
        return Err(err("header length exceeds file"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[cursor..cursor + header_len])
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    cursor += header_len;
    if header.version > FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (this build reads up to {FORMAT_VERSION})",
            header.version
        )));
    }
    header
        .spec
        .validate()
        .map_err(|e| Error::Checkpoint(format!("spec in header: {e}")))?;
    if header.param_count != header.spec.param_count() {
        return Err(err("declared parameter count disagrees with the spec"));
    }

    let payload = &body[cursor..];
    if payload.len() != header.param_count * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            header.param_count * 8,
            payload.len()
        )));
    }
    let mut values = Vec::with_capacity(header.param_count);
    for chunk in payload.chunks_exact(8) {
        let v = f64::from_le_bytes(chunk.try_into().expect("eight bytes"));
        if !v.is_finite() {
            return Err(err("non-finite parameter value"));
        }
        values.push(v);
    }
    let params = NetParams::from_vec(&header.spec, values)
        .map_err(|e| Error::Checkpoint(format!("parameters: {e}")))?;
    Ok((header, params))
}

pub fn load<R: Read>(mut reader: R) -> Result<(CheckpointHeader, NetParams)> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    load_bytes(&bytes)
}

pub fn load_from_path(path: &Path) -> Result<(CheckpointHeader, NetParams)> {
    let bytes = std::fs::read(path)?;
    load_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
