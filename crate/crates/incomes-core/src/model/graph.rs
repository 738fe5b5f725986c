//! Tape-bound forward, the training twin of [`super::infer`].
//!
//! Binds model parameters as tape leaves and rebuilds the same layer
//! arithmetic through tape ops, so gradients flow to every parameter. The
//! op sequence matches the inference path exactly — same kernels, same
//! reduction order — so full-sequence logits agree bit for bit.

use crate::error::{Error, Result};
use crate::tensor::scalar::Scalar;
use crate::tensor::tape::{NodeId, Tape};

use super::infer::rms_eps;
use super::{ModelConfig, ModelState};

/// Tape leaves of one layer's self-attention projections.
#[derive(Debug, Clone)]
pub struct GAttn {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
}

/// Tape leaves of one decoder layer.
#[derive(Debug, Clone)]
pub struct GLayer {
    pub norm1: NodeId,
    pub attn: GAttn,
    pub norm2: NodeId,
    pub ffn_in: NodeId,
    pub ffn_out: NodeId,
}

/// Tape leaves of one cross-attention block.
#[derive(Debug, Clone)]
pub struct GCross {
    pub layer: usize,
    pub wq: NodeId,
    pub wo: NodeId,
    pub zero_key: NodeId,
    pub zero_value: NodeId,
}

/// All parameter leaves of a bound model, mirroring
/// [`ModelState::params`] order.
#[derive(Debug, Clone)]
pub struct GraphParams {
    pub embed: NodeId,
    pub layers: Vec<GLayer>,
    pub final_norm: NodeId,
    pub unembed: NodeId,
    pub cross: Vec<GCross>,
}

impl GraphParams {
    /// Leaves in [`ModelState::params`] order.
    pub fn ordered(&self) -> Vec<NodeId> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            out.extend([
                l.norm1, l.attn.wq, l.attn.wk, l.attn.wv, l.attn.wo, l.norm2, l.ffn_in, l.ffn_out,
            ]);
        }
        out.push(self.final_norm);
        out.push(self.unembed);
        for c in &self.cross {
            out.extend([c.wq, c.wo, c.zero_key, c.zero_value]);
        }
        out
    }
}

/// Bind every parameter of `state` as a tape leaf (learnable where the
/// tensor is).
pub fn bind<T: Scalar>(tape: &mut Tape<T>, state: &ModelState<T>) -> GraphParams {
    GraphParams {
        embed: tape.leaf_tensor(&state.embed),
        layers: state
            .layers
            .iter()
            .map(|l| GLayer {
                norm1: tape.leaf_tensor(&l.norm1),
                attn: GAttn {
                    wq: tape.leaf_tensor(&l.attn.wq),
                    wk: tape.leaf_tensor(&l.attn.wk),
                    wv: tape.leaf_tensor(&l.attn.wv),
                    wo: tape.leaf_tensor(&l.attn.wo),
                },
                norm2: tape.leaf_tensor(&l.norm2),
                ffn_in: tape.leaf_tensor(&l.ffn_in),
                ffn_out: tape.leaf_tensor(&l.ffn_out),
            })
            .collect(),
        final_norm: tape.leaf_tensor(&state.final_norm),
        unembed: tape.leaf_tensor(&state.unembed),
        cross: state
            .cross
            .iter()
            .map(|c| GCross {
                layer: c.layer,
                wq: tape.leaf_tensor(&c.wq),
                wo: tape.leaf_tensor(&c.wo),
                zero_key: tape.leaf_tensor(&c.zero_key),
                zero_value: tape.leaf_tensor(&c.zero_value),
            })
            .collect(),
    }
}

/// Add each learnable parameter's tape gradient into its tensor.
///
/// # Errors
/// Shape error if the tape and state disagree on a parameter's size.
pub fn harvest_grads<T: Scalar>(
    tape: &Tape<T>,
    gp: &GraphParams,
    state: &mut ModelState<T>,
) -> Result<()> {
    let ids = gp.ordered();
    let mut params = state.params_mut();
    debug_assert_eq!(ids.len(), params.len());
    for (id, (_, t)) in ids.iter().zip(params.iter_mut()) {
        if t.requires_grad() {
            t.accumulate_grad(tape.grad(*id))?;
        }
    }
    Ok(())
}

/// Pool contents bound on the tape: one `n x d_model` key and value node
/// per cross layer. The nodes may be graph outputs (compression running on
/// the same tape) or bridge leaves seeded from per-edit sub-tapes; keys
/// must already be positioned when the config fixes a key position.
#[derive(Debug, Clone)]
pub struct GraphPool {
    pub n: usize,
    pub keys: Vec<NodeId>,
    pub values: Vec<NodeId>,
}

/// Per-cross-layer trace of a pool-conditioned graph forward: enough to
/// read attention probabilities and to aim auxiliary losses at the pool.
#[derive(Debug, Clone)]
pub struct GraphCrossTrace {
    pub layer: usize,
    /// The cross-attention node; its probabilities are
    /// [`Tape::cross_probs`].
    pub attn: NodeId,
    /// The (rotated, when applicable) cross queries, `s x d_model`.
    pub q: NodeId,
}

/// A graph forward's outputs.
#[derive(Debug, Clone)]
pub struct GraphForward {
    /// `logit_rows.len() x vocab`.
    pub logits: NodeId,
    pub cross: Vec<GraphCrossTrace>,
}

/// Full forward on the tape with logits at `logit_rows`.
///
/// # Errors
/// Contract/shape/index errors mirroring the inference-path checks.
pub fn forward_graph<T: Scalar>(
    tape: &mut Tape<T>,
    gp: &GraphParams,
    cfg: &ModelConfig,
    tokens: &[u32],
    pool: Option<(&GraphPool, T)>,
    logit_rows: &[usize],
) -> Result<GraphForward> {
    let s = tokens.len();
    if s == 0 {
        return Err(Error::contract("forward over zero tokens"));
    }
    if s > cfg.max_seq_len {
        return Err(Error::Capacity {
            len: s,
            max: cfg.max_seq_len,
        });
    }
    if logit_rows.is_empty() {
        return Err(Error::contract("graph forward needs at least one logit row"));
    }
    if let Some((p, _)) = pool {
        if gp.cross.len() != cfg.cross_layers.len() {
            return Err(Error::contract(
                "pool forward on a model without matching cross-attention blocks",
            ));
        }
        if p.keys.len() != cfg.cross_layers.len() || p.values.len() != cfg.cross_layers.len() {
            return Err(Error::contract("pool layer count differs from cross layers"));
        }
    }
    let heads = cfg.n_heads;
    let mut x = tape.embed(gp.embed, tokens)?;
    let mut cross_traces = Vec::new();
    let mut cross_i = 0usize;
    for (l, layer) in gp.layers.iter().enumerate() {
        let h = tape.rmsnorm(x, layer.norm1, rms_eps::<T>())?;
        let q = tape.matmul(h, layer.attn.wq)?;
        let k = tape.matmul(h, layer.attn.wk)?;
        let v = tape.matmul(h, layer.attn.wv)?;
        let qr = tape.rope(q, heads)?;
        let kr = tape.rope(k, heads)?;
        let attn = tape.causal_attn(qr, kr, v, heads)?;
        let attn_out = tape.matmul(attn, layer.attn.wo)?;
        if cfg.is_cross_layer(l) && pool.is_some() {
            let (p, temp) = pool.unwrap();
            let cb = &gp.cross[cross_i];
            debug_assert_eq!(cb.layer, l);
            let mut qc = tape.matmul(h, cb.wq)?;
            if cfg.gist_key_position.is_some() {
                qc = tape.rope(qc, heads)?;
            }
            let ca = tape.cross_attn(
                qc,
                p.keys[cross_i],
                p.values[cross_i],
                cb.zero_key,
                cb.zero_value,
                heads,
                temp,
                cfg.zero_gist,
            )?;
            let cross_out = tape.matmul(ca, cb.wo)?;
            x = tape.add_n(&[x, attn_out, cross_out])?;
            cross_traces.push(GraphCrossTrace {
                layer: l,
                attn: ca,
                q: qc,
            });
        } else {
            x = tape.add(x, attn_out)?;
        }
        if cfg.is_cross_layer(l) {
            cross_i += 1;
        }
        let h2 = tape.rmsnorm(x, layer.norm2, rms_eps::<T>())?;
        let f1 = tape.matmul(h2, layer.ffn_in)?;
        let act = tape.silu(f1);
        let f = tape.matmul(act, layer.ffn_out)?;
        x = tape.add(x, f)?;
    }
    let xs = tape.slice_rows(x, logit_rows)?;
    let xf = tape.rmsnorm(xs, gp.final_norm, rms_eps::<T>())?;
    let logits = tape.matmul(xf, gp.unembed)?;
    Ok(GraphForward {
        logits,
        cross: cross_traces,
    })
}

/// Compression on the tape: run the base-model math over an edit's tokens
/// and slice out the gist row's pre-rotation key and value at every cross
/// layer. No cross attention and no unembedding run — an edit is encoded
/// by the plain decoder.
///
/// Returns one `([1, d] key, [1, d] value)` node pair per cross layer.
pub fn compress_graph<T: Scalar>(
    tape: &mut Tape<T>,
    gp: &GraphParams,
    cfg: &ModelConfig,
    tokens: &[u32],
) -> Result<Vec<(NodeId, NodeId)>> {
    let s = tokens.len();
    if s == 0 {
        return Err(Error::contract("compression over zero tokens"));
    }
    if s > cfg.max_seq_len {
        return Err(Error::Capacity {
            len: s,
            max: cfg.max_seq_len,
        });
    }
    let heads = cfg.n_heads;
    let gist_row = [s - 1];
    let mut x = tape.embed(gp.embed, tokens)?;
    let mut out = Vec::with_capacity(cfg.cross_layers.len());
    for (l, layer) in gp.layers.iter().enumerate() {
        let h = tape.rmsnorm(x, layer.norm1, rms_eps::<T>())?;
        let q = tape.matmul(h, layer.attn.wq)?;
        let k = tape.matmul(h, layer.attn.wk)?;
        let v = tape.matmul(h, layer.attn.wv)?;
        if cfg.is_cross_layer(l) {
            let krow = tape.slice_rows(k, &gist_row)?;
            let vrow = tape.slice_rows(v, &gist_row)?;
            out.push((krow, vrow));
        }
        let qr = tape.rope(q, heads)?;
        let kr = tape.rope(k, heads)?;
        let attn = tape.causal_attn(qr, kr, v, heads)?;
        let attn_out = tape.matmul(attn, layer.attn.wo)?;
        x = tape.add(x, attn_out)?;
        let h2 = tape.rmsnorm(x, layer.norm2, rms_eps::<T>())?;
        let f1 = tape.matmul(h2, layer.ffn_in)?;
        let act = tape.silu(f1);
        let f = tape.matmul(act, layer.ffn_out)?;
        x = tape.add(x, f)?;
    }
    Ok(out)
}
