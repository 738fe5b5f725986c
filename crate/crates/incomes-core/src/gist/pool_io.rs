//! Pool serialization: magic `INCP`, a version word, the SHA-256 of the
//! producing config's canonical JSON, then the entries.
//!
//! ```text
//! b"INCP"  u32 version  32-byte config fingerprint  u32 entry_count
//! repeat: u64 edit_id, payload
//! ```
//!
//! One entry's payload: per cross layer ascending, per head, the key row
//! then the value row, `head_dim` f32s each (LE, bit-preserving). Loading
//! under a config whose fingerprint differs is rejected — pool rows are
//! meaningless under any other model geometry.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::infer::GistKV;
use crate::model::ModelConfig;

use super::{entry_payload_bytes, GistEntry, GistPool};

const MAGIC: &[u8; 4] = b"INCP";
const VERSION: u32 = 1;

/// SHA-256 of the config's canonical JSON.
pub fn config_fingerprint(cfg: &ModelConfig) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(cfg.canonical_json().as_bytes());
    h.finalize().into()
}

fn fmt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Serialize one entry's payload (no id) in the on-disk order.
pub fn entry_payload(cfg: &ModelConfig, e: &GistEntry<f32>) -> Vec<u8> {
    let hd = cfg.head_dim();
    let mut out = Vec::with_capacity(entry_payload_bytes(cfg));
    for kv in &e.kv {
        for h in 0..cfg.n_heads {
            for &x in &kv.k[h * hd..(h + 1) * hd] {
                out.extend_from_slice(&x.to_le_bytes());
            }
            for &x in &kv.v[h * hd..(h + 1) * hd] {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

/// Write `pool` to `path`.
///
/// # Errors
/// Contract error if an entry disagrees with the config's geometry; I/O
/// errors from the filesystem.
pub fn save_pool(path: &Path, cfg: &ModelConfig, pool: &GistPool<f32>) -> Result<()> {
    let d = cfg.d_model;
    let nc = cfg.cross_layers.len();
    for e in pool.entries() {
        if e.kv.len() != nc || e.kv.iter().any(|kv| kv.k.len() != d || kv.v.len() != d) {
            return Err(Error::contract(format!(
                "edit {} does not match the config geometry",
                e.edit_id
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&config_fingerprint(cfg))?;
    w.write_all(&(pool.len() as u32).to_le_bytes())?;
    for e in pool.entries() {
        w.write_all(&e.edit_id.to_le_bytes())?;
        w.write_all(&entry_payload(cfg, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a pool written by [`save_pool`] under the same config.
///
/// # Errors
/// Format errors for bad magic/version, a fingerprint from a different
/// config, or truncated entries.
pub fn load_pool(path: &Path, cfg: &ModelConfig) -> Result<GistPool<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(fmt_err(path, "bad magic"));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)?;
    let version = u32::from_le_bytes(vb);
    if version != VERSION {
        return Err(fmt_err(path, format!("unsupported version {version}")));
    }
    let mut fp = [0u8; 32];
    r.read_exact(&mut fp)?;
    if fp != config_fingerprint(cfg) {
        return Err(fmt_err(
            path,
            "pool was produced under a different model config",
        ));
    }
    let mut cb = [0u8; 4];
    r.read_exact(&mut cb)?;
    let count = u32::from_le_bytes(cb) as usize;
    let hd = cfg.head_dim();
    let d = cfg.d_model;
    let mut pool = GistPool::new();
    let mut idb = [0u8; 8];
    let mut fb = [0u8; 4];
    for _ in 0..count {
        r.read_exact(&mut idb)?;
        let edit_id = u64::from_le_bytes(idb);
        let mut kv = Vec::with_capacity(cfg.cross_layers.len());
        for _ in 0..cfg.cross_layers.len() {
            let mut k = vec![0.0f32; d];
            let mut v = vec![0.0f32; d];
            for h in 0..cfg.n_heads {
                for x in &mut k[h * hd..(h + 1) * hd] {
                    r.read_exact(&mut fb)?;
                    *x = f32::from_le_bytes(fb);
                }
                for x in &mut v[h * hd..(h + 1) * hd] {
                    r.read_exact(&mut fb)?;
                    *x = f32::from_le_bytes(fb);
                }
            }
            kv.push(GistKV { k, v });
        }
        pool.add(GistEntry { edit_id, kv })
            .map_err(|e| fmt_err(path, e.to_string()))?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(fmt_err(path, "trailing bytes after the last entry"));
    }
    Ok(pool)
}
