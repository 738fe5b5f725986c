//! Cache-based inference forward.
//!
//! One engine serves four uses: plain language modeling, pool-conditioned
//! forwarding, incremental greedy decoding, and gist capture (reading off
//! the pre-rotation key and the value of the gist row at every cross
//! layer). It calls the same numeric kernels as the autodiff graph in the
//! same order, so a full-sequence inference forward from position 0 equals
//! the training-graph forward bit for bit.

use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::scalar::Scalar;

use super::{KVCache, ModelConfig, ModelState, PoolTensors};

/// What a forward call should produce beyond advancing the cache.
pub struct ForwardReq<'a, T> {
    /// Pool to cross-attend to; `None` skips the cross path entirely.
    pub pool: Option<&'a PoolTensors<T>>,
    /// Cross-attention temperature (ignored without a pool).
    pub temperature: T,
    /// Rows (indices into this call's tokens) to unembed; `None` = all.
    pub logit_rows: Option<&'a [usize]>,
    /// Collect cross-attention probabilities per cross layer.
    pub want_probe: bool,
    /// Capture the pre-rotation key and the value of this row at every
    /// cross layer (the compression read-out).
    pub gist_row: Option<usize>,
}

impl<'a, T: Scalar> ForwardReq<'a, T> {
    /// Plain language modeling, logits at every row.
    pub fn base() -> Self {
        ForwardReq {
            pool: None,
            temperature: T::ONE,
            logit_rows: None,
            want_probe: false,
            gist_row: None,
        }
    }

    /// Pool-conditioned forward, logits at every row.
    pub fn with_pool(pool: &'a PoolTensors<T>, temperature: T) -> Self {
        ForwardReq {
            pool: Some(pool),
            temperature,
            logit_rows: None,
            want_probe: false,
            gist_row: None,
        }
    }

    pub fn rows(mut self, rows: &'a [usize]) -> Self {
        self.logit_rows = Some(rows);
        self
    }

    pub fn probe(mut self) -> Self {
        self.want_probe = true;
        self
    }
}

/// Pre-rotation key and value rows of the gist position at one cross layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GistKV<T> {
    pub k: Vec<T>,
    pub v: Vec<T>,
}

/// Cross-attention probabilities of one cross layer, `s x n_heads x (n+1)`;
/// entry 0 is the zero entry.
#[derive(Debug, Clone)]
pub struct LayerProbe<T> {
    pub layer: usize,
    pub n: usize,
    pub probs: Vec<T>,
}

/// Per-cross-layer attention probes, ascending layer order.
#[derive(Debug, Clone)]
pub struct AttnProbe<T> {
    pub layers: Vec<LayerProbe<T>>,
}

/// Everything a forward call returned.
pub struct ForwardOut<T> {
    /// Row-major `rows x vocab` (rows = requested rows or all tokens).
    pub logits: Vec<T>,
    pub probe: Option<AttnProbe<T>>,
    /// One entry per cross layer when a gist row was requested.
    pub gist: Option<Vec<GistKV<T>>>,
}

/// Run the model over `tokens`, appending to `cache`.
///
/// `tokens` continue at absolute position `cache.len()`. Logit rows index
/// into this call's tokens.
///
/// # Errors
/// Capacity error past `max_seq_len`; index errors for out-of-range token
/// ids or rows; contract errors for pool/extension mismatches.
pub fn forward<T: Scalar>(
    state: &ModelState<T>,
    cfg: &ModelConfig,
    tokens: &[u32],
    cache: &mut KVCache<T>,
    req: &ForwardReq<'_, T>,
) -> Result<ForwardOut<T>> {
    let s = tokens.len();
    if s == 0 {
        return Err(Error::contract("forward over zero tokens"));
    }
    let start = cache.len();
    if start + s > cfg.max_seq_len {
        return Err(Error::Capacity {
            len: start + s,
            max: cfg.max_seq_len,
        });
    }
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    for &t in tokens {
        if t as usize >= cfg.vocab_size {
            return Err(Error::Index {
                what: "token id",
                got: t as usize,
                limit: cfg.vocab_size,
            });
        }
    }
    if let Some(rows) = req.logit_rows {
        for &r in rows {
            if r >= s {
                return Err(Error::Index {
                    what: "logit row",
                    got: r,
                    limit: s,
                });
            }
        }
    }
    if let Some(g) = req.gist_row {
        if g >= s {
            return Err(Error::Index {
                what: "gist row",
                got: g,
                limit: s,
            });
        }
    }
    if let Some(pool) = req.pool {
        if state.cross.len() != cfg.cross_layers.len() {
            return Err(Error::contract(
                "pool forward on a model without matching cross-attention blocks",
            ));
        }
        if pool.keys.len() != cfg.cross_layers.len() || pool.values.len() != cfg.cross_layers.len()
        {
            return Err(Error::contract("pool layer count differs from cross layers"));
        }
        for (k, v) in pool.keys.iter().zip(&pool.values) {
            if k.len() != pool.n * d || v.len() != pool.n * d {
                return Err(Error::contract("pool tensor length mismatch"));
            }
        }
        if pool.n == 0 && !cfg.zero_gist {
            return Err(Error::contract(
                "empty pool with the zero entry disabled leaves nothing to attend to",
            ));
        }
        if !(req.temperature > T::ZERO) || !req.temperature.is_finite() {
            return Err(Error::param("temperature", "must be finite and > 0"));
        }
    }

    // embed
    let mut x = vec![T::ZERO; s * d];
    for (i, &t) in tokens.iter().enumerate() {
        x[i * d..(i + 1) * d].copy_from_slice(&state.embed.data()[t as usize * d..(t as usize + 1) * d]);
    }

    let mut gist_out: Vec<GistKV<T>> = Vec::new();
    let mut probe_layers: Vec<LayerProbe<T>> = Vec::new();
    let mut h = vec![T::ZERO; s * d];
    let mut q = vec![T::ZERO; s * d];
    let mut k = vec![T::ZERO; s * d];
    let mut v = vec![T::ZERO; s * d];
    let mut attn_heads = vec![T::ZERO; s * d];
    let mut attn_out = vec![T::ZERO; s * d];
    let mut ffn_h = vec![T::ZERO; s * cfg.ffn_hidden()];
    let mut ffn_act = vec![T::ZERO; s * cfg.ffn_hidden()];
    let mut ffn_out = vec![T::ZERO; s * d];
    let mut cross_i = 0usize;

    for (l, layer) in state.layers.iter().enumerate() {
        kernels::rmsnorm_rows(&x, layer.norm1.data(), s, d, rms_eps::<T>(), &mut h);
        kernels::matmul(&h, layer.attn.wq.data(), &mut q, s, d, d);
        kernels::matmul(&h, layer.attn.wk.data(), &mut k, s, d, d);
        kernels::matmul(&h, layer.attn.wv.data(), &mut v, s, d, d);

        let is_cross = cfg.is_cross_layer(l);
        if is_cross {
            if let Some(g) = req.gist_row {
                gist_out.push(GistKV {
                    k: k[g * d..(g + 1) * d].to_vec(),
                    v: v[g * d..(g + 1) * d].to_vec(),
                });
            }
        }

        kernels::rope_rows(&mut q, s, d, heads, start, false);
        kernels::rope_rows(&mut k, s, d, heads, start, false);
        cache.k[l].extend_from_slice(&k);
        cache.v[l].extend_from_slice(&v);
        kernels::causal_attention_cached(
            &q,
            &cache.k[l],
            &cache.v[l],
            s,
            start + s,
            start,
            heads,
            hd,
            &mut attn_heads,
        );
        kernels::matmul(&attn_heads, layer.attn.wo.data(), &mut attn_out, s, d, d);

        if is_cross && req.pool.is_some() {
            let pool = req.pool.unwrap();
            let cb = &state.cross[cross_i];
            debug_assert_eq!(cb.layer, l);
            let mut qc = vec![T::ZERO; s * d];
            kernels::matmul(&h, cb.wq.data(), &mut qc, s, d, d);
            if cfg.gist_key_position.is_some() {
                kernels::rope_rows(&mut qc, s, d, heads, start, false);
            }
            let n = pool.n;
            let mut cross_heads = vec![T::ZERO; s * d];
            let mut probs = vec![T::ZERO; s * heads * (n + 1)];
            kernels::cross_attention(
                &qc,
                &pool.keys[cross_i],
                &pool.values[cross_i],
                cb.zero_key.data(),
                cb.zero_value.data(),
                s,
                n,
                heads,
                hd,
                T::ONE / req.temperature,
                cfg.zero_gist,
                &mut cross_heads,
                &mut probs,
            );
            let mut cross_out = vec![T::ZERO; s * d];
            kernels::matmul(&cross_heads, cb.wo.data(), &mut cross_out, s, d, d);
            for ((xv, &av), &cv) in x.iter_mut().zip(&attn_out).zip(&cross_out) {
                *xv = *xv + av + cv;
            }
            if req.want_probe {
                probe_layers.push(LayerProbe { layer: l, n, probs });
            }
        } else {
            for (xv, &av) in x.iter_mut().zip(&attn_out) {
                *xv = *xv + av;
            }
        }
        if is_cross {
            cross_i += 1;
        }

        kernels::rmsnorm_rows(&x, layer.norm2.data(), s, d, rms_eps::<T>(), &mut h);
        kernels::matmul(&h, layer.ffn_in.data(), &mut ffn_h, s, d, cfg.ffn_hidden());
        kernels::silu(&ffn_h, &mut ffn_act);
        kernels::matmul(&ffn_act, layer.ffn_out.data(), &mut ffn_out, s, cfg.ffn_hidden(), d);
        for (xv, &fv) in x.iter_mut().zip(&ffn_out) {
            *xv = *xv + fv;
        }
    }
    cache.bump(s);

    let all_rows: Vec<usize>;
    let rows: &[usize] = match req.logit_rows {
        Some(r) => r,
        None => {
            all_rows = (0..s).collect();
            &all_rows
        }
    };
    let logits = if rows.is_empty() {
        Vec::new()
    } else {
        let mut xs = vec![T::ZERO; rows.len() * d];
        for (i, &r) in rows.iter().enumerate() {
            xs[i * d..(i + 1) * d].copy_from_slice(&x[r * d..(r + 1) * d]);
        }
        let mut xf = vec![T::ZERO; rows.len() * d];
        kernels::rmsnorm_rows(&xs, state.final_norm.data(), rows.len(), d, rms_eps::<T>(), &mut xf);
        let mut logits = vec![T::ZERO; rows.len() * cfg.vocab_size];
        kernels::matmul(&xf, state.unembed.data(), &mut logits, rows.len(), d, cfg.vocab_size);
        logits
    };

    Ok(ForwardOut {
        logits,
        probe: if req.want_probe {
            Some(AttnProbe {
                layers: probe_layers,
            })
        } else {
            None
        },
        gist: req.gist_row.map(|_| gist_out),
    })
}

/// RMSNorm epsilon shared by inference and the autodiff graph.
pub fn rms_eps<T: Scalar>() -> T {
    T::from_f64(1e-5)
}

/// Logits over a whole sequence from a fresh cache, optionally restricted
/// to `rows` and optionally pool-conditioned.
pub fn sequence_logits<T: Scalar>(
    state: &ModelState<T>,
    cfg: &ModelConfig,
    tokens: &[u32],
    pool: Option<(&PoolTensors<T>, T)>,
    rows: Option<&[usize]>,
) -> Result<Vec<T>> {
    let mut cache = KVCache::new(cfg.n_layers);
    let mut req = match pool {
        Some((p, t)) => ForwardReq::with_pool(p, t),
        None => ForwardReq::base(),
    };
    req.logit_rows = rows;
    Ok(forward(state, cfg, tokens, &mut cache, &req)?.logits)
}

/// Greedy continuation of `prompt` by `max_new` tokens.
pub fn greedy_decode<T: Scalar>(
    state: &ModelState<T>,
    cfg: &ModelConfig,
    prompt: &[u32],
    pool: Option<(&PoolTensors<T>, T)>,
    max_new: usize,
) -> Result<Vec<u32>> {
    let mut cache = KVCache::new(cfg.n_layers);
    let mut out = Vec::with_capacity(max_new);
    if max_new == 0 {
        return Ok(out);
    }
    let mut req = match pool {
        Some((p, t)) => ForwardReq::with_pool(p, t),
        None => ForwardReq::base(),
    };
    let last = [prompt.len() - 1];
    req.logit_rows = Some(&last);
    let fo = forward(state, cfg, prompt, &mut cache, &req)?;
    let mut next = kernels::argmax_row(&fo.logits) as u32;
    out.push(next);
    let first = [0usize];
    for _ in 1..max_new {
        let mut step_req = match pool {
            Some((p, t)) => ForwardReq::with_pool(p, t),
            None => ForwardReq::base(),
        };
        step_req.logit_rows = Some(&first);
        let fo = forward(state, cfg, &[next], &mut cache, &step_req)?;
        next = kernels::argmax_row(&fo.logits) as u32;
        out.push(next);
    }
    Ok(out)
}

/// Run the base-model math over `tokens` and read off the gist row's
/// pre-rotation key and value at every cross layer. This is the whole of
/// compression at inference time: no cross attention runs (an absent pool
/// and a zero output projection compute the same thing), so the captured
/// rows are exactly what the training graph's compression pass produces.
pub fn encode_gist<T: Scalar>(
    state: &ModelState<T>,
    cfg: &ModelConfig,
    tokens: &[u32],
) -> Result<Vec<GistKV<T>>> {
    let mut cache = KVCache::new(cfg.n_layers);
    let req = ForwardReq {
        pool: None,
        temperature: T::ONE,
        logit_rows: Some(&[]),
        want_probe: false,
        gist_row: Some(tokens.len().saturating_sub(1)),
    };
    let fo = forward(state, cfg, tokens, &mut cache, &req)?;
    Ok(fo.gist.expect("gist requested"))
}
