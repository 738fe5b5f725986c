//! Checkpoint format: magic `INCS`, a version word, the config as JSON,
//! then one record per parameter in canonical order.
//!
//! ```text
//! b"INCS"  u32 version  u32 json_len  json
//! u32 record_count
//! repeat: u32 name_len, name, u32 rank, rank x u64 dims, f32 data (LE)
//! ```
//!
//! Floats travel through `to_le_bytes`/`from_le_bytes`, so a save/load
//! round trip is bit-exact. Learnability is structural — every parameter
//! learns except the pinned `cross.*.zero_value` rows — so no flags are
//! stored.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{AttnParams, CrossParams, LayerParams, ModelConfig, ModelState};

const MAGIC: &[u8; 4] = b"INCS";
const VERSION: u32 = 1;
/// Sanity bound against corrupt headers, far above any real parameter.
const MAX_ELEMS: u64 = 1 << 31;

fn fmt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Write `state` (with its config) to `path`, creating or truncating it.
///
/// # Errors
/// I/O errors from the filesystem.
pub fn save(path: &Path, cfg: &ModelConfig, state: &ModelState<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let json = cfg.canonical_json();
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(json.as_bytes())?;
    let params = state.params();
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Read a checkpoint back.
///
/// # Errors
/// Format errors for bad magic, version, unknown or missing parameters, or
/// shape mismatches against the embedded config.
pub fn load(path: &Path) -> Result<(ModelConfig, ModelState<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(fmt_err(path, "bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(fmt_err(path, format!("unsupported version {version}")));
    }
    let json_len = read_u32(&mut r)? as usize;
    if json_len > 1 << 20 {
        return Err(fmt_err(path, "config block too large"));
    }
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)?;
    let cfg: ModelConfig = serde_json::from_slice(&json)
        .map_err(|e| fmt_err(path, format!("config: {e}")))?;
    cfg.validate()?;

    let count = read_u32(&mut r)? as usize;
    let mut records: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(fmt_err(path, "parameter name too long"));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| fmt_err(path, "non-UTF-8 name"))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(fmt_err(path, format!("{name}: rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut elems: u64 = 1;
        for _ in 0..rank {
            let d = read_u64(&mut r)?;
            elems = elems.saturating_mul(d.max(1));
            shape.push(d as usize);
        }
        if elems > MAX_ELEMS {
            return Err(fmt_err(path, format!("{name}: too many elements")));
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut b = [0u8; 4];
        for _ in 0..len {
            r.read_exact(&mut b)?;
            data.push(f32::from_le_bytes(b));
        }
        if records
            .insert(name.clone(), Tensor::from_vec(&shape, data)?)
            .is_some()
        {
            return Err(fmt_err(path, format!("duplicate parameter {name}")));
        }
    }

    let has_cross = records.keys().any(|k| k.starts_with("cross."));
    let state = assemble(path, &cfg, &mut records, has_cross)?;
    if let Some(extra) = records.keys().next() {
        return Err(fmt_err(path, format!("unexpected parameter {extra}")));
    }
    Ok((cfg, state))
}

fn take(
    path: &Path,
    records: &mut BTreeMap<String, Tensor<f32>>,
    name: &str,
    shape: &[usize],
    learnable: bool,
) -> Result<Tensor<f32>> {
    let t = records
        .remove(name)
        .ok_or_else(|| fmt_err(path, format!("missing parameter {name}")))?;
    if t.shape() != shape {
        return Err(fmt_err(
            path,
            format!("{name}: shape {:?}, expected {:?}", t.shape(), shape),
        ));
    }
    Ok(if learnable { t.with_grad() } else { t })
}

fn assemble(
    path: &Path,
    cfg: &ModelConfig,
    rec: &mut BTreeMap<String, Tensor<f32>>,
    has_cross: bool,
) -> Result<ModelState<f32>> {
    let d = cfg.d_model;
    let h = cfg.ffn_hidden();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        layers.push(LayerParams {
            norm1: take(path, rec, &format!("layers.{l}.norm1"), &[d], true)?,
            attn: AttnParams {
                wq: take(path, rec, &format!("layers.{l}.attn.wq"), &[d, d], true)?,
                wk: take(path, rec, &format!("layers.{l}.attn.wk"), &[d, d], true)?,
                wv: take(path, rec, &format!("layers.{l}.attn.wv"), &[d, d], true)?,
                wo: take(path, rec, &format!("layers.{l}.attn.wo"), &[d, d], true)?,
            },
            norm2: take(path, rec, &format!("layers.{l}.norm2"), &[d], true)?,
            ffn_in: take(path, rec, &format!("layers.{l}.ffn_in"), &[d, h], true)?,
            ffn_out: take(path, rec, &format!("layers.{l}.ffn_out"), &[h, d], true)?,
        });
    }
    let mut cross = Vec::new();
    if has_cross {
        for &l in &cfg.cross_layers {
            cross.push(CrossParams {
                layer: l,
                wq: take(path, rec, &format!("cross.{l}.wq"), &[d, d], true)?,
                wo: take(path, rec, &format!("cross.{l}.wo"), &[d, d], true)?,
                zero_key: take(path, rec, &format!("cross.{l}.zero_key"), &[d], true)?,
                zero_value: take(path, rec, &format!("cross.{l}.zero_value"), &[d], false)?,
            });
        }
    }
    Ok(ModelState {
        embed: take(path, rec, "embed", &[cfg.vocab_size, d], true)?,
        layers,
        final_norm: take(path, rec, "final_norm", &[d], true)?,
        unembed: take(path, rec, "unembed", &[d, cfg.vocab_size], true)?,
        cross,
    })
}

/// SHA-256 over every parameter's name, shape, and exact bytes, in
/// canonical order. Two states digest equal iff they are bit-identical.
pub fn state_digest(state: &ModelState<f32>) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, t) in state.params() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &x in t.data() {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 16,
            cross_layers: vec![1],
            zero_gist: true,
            gist_key_position: None,
            train_temperature: 1.0,
            infer_temperature: 0.45,
        }
    }

    #[test]
    fn digest_detects_any_single_bit_change() {
        let c = cfg();
        let mut m: ModelState<f32> = ModelState::init(&c, 5).unwrap();
        let d0 = state_digest(&m);
        assert_eq!(d0, state_digest(&m));
        m.layers[1].ffn_in.data_mut()[3] += 1e-7;
        assert_ne!(d0, state_digest(&m));
    }
}
