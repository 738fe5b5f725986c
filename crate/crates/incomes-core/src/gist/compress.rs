//! Inference-time edit compression.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{infer, ModelConfig, ModelState};
use crate::tensor::scalar::Scalar;

use super::GistEntry;

/// Compress one edit: append the gist token, run the plain decoder, keep
/// the gist row's key/value at every cross layer. No leading marker token
/// is added — the edit text stands alone.
///
/// # Errors
/// Contract error on an empty edit; capacity error past `max_seq_len`.
pub fn compress_edit<T: Scalar>(
    state: &ModelState<T>,
    cfg: &ModelConfig,
    edit_id: u64,
    tokens: &[u32],
) -> Result<GistEntry<T>> {
    if tokens.is_empty() {
        return Err(Error::contract("compressing an empty edit"));
    }
    let mut seq = Vec::with_capacity(tokens.len() + 1);
    seq.extend_from_slice(tokens);
    seq.push(cfg.gist_token_id());
    let kv = infer::encode_gist(state, cfg, &seq)?;
    Ok(GistEntry { edit_id, kv })
}

/// Compress a batch of edits on up to `parallelism` workers.
///
/// Entries come back in input order, and every entry is bitwise identical
/// to what [`compress_edit`] produces alone: edits never share state, so
/// the worker count can only change wall time, never bytes.
///
/// # Errors
/// The first per-edit error in input order, or a param error for
/// `parallelism == 0`.
pub fn compress_batch<T: Scalar>(
    state: &ModelState<T>,
    cfg: &ModelConfig,
    edits: &[(u64, Vec<u32>)],
    parallelism: usize,
) -> Result<Vec<GistEntry<T>>> {
    if parallelism == 0 {
        return Err(Error::param("parallelism", "must be at least 1"));
    }
    let run = |pairs: &[(u64, Vec<u32>)]| -> Vec<Result<GistEntry<T>>> {
        pairs
            .par_iter()
            .map(|(id, tokens)| compress_edit(state, cfg, *id, tokens))
            .collect()
    };
    let results = if parallelism == 1 {
        edits
            .iter()
            .map(|(id, tokens)| compress_edit(state, cfg, *id, tokens))
            .collect::<Vec<_>>()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| Error::contract(format!("worker pool: {e}")))?;
        pool.install(|| run(edits))
    };
    results.into_iter().collect()
}
