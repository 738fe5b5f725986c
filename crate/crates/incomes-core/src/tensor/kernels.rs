//! Shared numeric kernels.
//!
//! Both the autodiff tape and the cache-based inference path call these
//! functions, which is what makes "training forward == inference forward"
//! a bitwise statement rather than a tolerance. Every reduction runs in a
//! fixed, documented order:
//!
//! * matmul accumulates over the inner dimension in ascending order;
//! * attention reduces over the feature (head) dimension first, then over
//!   entries/positions in ascending order;
//! * row reductions (softmax sums, norms, entropies) run left to right.
//!
//! No kernel allocates unless its result size depends on the input; callers
//! pass output buffers.
//!
//! Layout: matrices are row-major. Multi-head rows pack head `h` into
//! columns `h*head_dim .. (h+1)*head_dim`.

use super::scalar::Scalar;

/// Rotary base shared by every model in the crate.
pub const ROPE_BASE: f64 = 10_000.0;

/// `c = a @ b` with `a` of `m x k`, `b` of `k x n`, `c` of `m x n`.
/// `c` is overwritten.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        crow.fill(T::ZERO);
        let arow = &a[i * k..(i + 1) * k];
        for (l, &a_il) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + a_il * bv;
            }
        }
    }
}

/// `da += g @ b^T` with `g` of `m x n`, `b` of `k x n`, `da` of `m x k`.
pub fn matmul_grad_a_acc<T: Scalar>(g: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(da.len(), m * k);
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            let mut s = T::ZERO;
            for (&gv, &bv) in grow.iter().zip(brow) {
                s = s + gv * bv;
            }
            darow[l] += s;
        }
    }
}

/// `db += a^T @ g` with `a` of `m x k`, `g` of `m x n`, `db` of `k x n`.
pub fn matmul_grad_b_acc<T: Scalar>(a: &[T], g: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(db.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (l, &a_il) in arow.iter().enumerate() {
            let dbrow = &mut db[l * n..(l + 1) * n];
            for (dv, &gv) in dbrow.iter_mut().zip(grow) {
                *dv = *dv + a_il * gv;
            }
        }
    }
}

/// Softmax of one row at inverse temperature, in place.
/// Max-shifted: `p_i = exp(x_i*it - max_j(x_j*it)) / sum`.
pub fn softmax_row<T: Scalar>(row: &mut [T], inv_temp: T) {
    let mut m = row[0] * inv_temp;
    for &x in row.iter().skip(1) {
        m = m.maxv(x * inv_temp);
    }
    let mut sum = T::ZERO;
    for x in row.iter_mut() {
        *x = (*x * inv_temp - m).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// Log-sum-exp of a row (max-shifted, left-to-right sum).
pub fn logsumexp_row<T: Scalar>(row: &[T]) -> T {
    let mut m = row[0];
    for &x in row.iter().skip(1) {
        m = m.maxv(x);
    }
    let mut sum = T::ZERO;
    for &x in row {
        sum += (x - m).exp();
    }
    m + sum.ln()
}

/// Cross entropy of one logits row against a target index.
/// Returns the loss and the row's softmax (needed by backward).
pub fn cross_entropy_row<T: Scalar>(logits: &[T], target: usize) -> (T, Vec<T>) {
    let lse = logsumexp_row(logits);
    let probs: Vec<T> = logits.iter().map(|&z| (z - lse).exp()).collect();
    (lse - logits[target], probs)
}

/// KL(p || softmax(logits)) for one row, skipping `p_i == 0` terms.
/// Returns the divergence and the row's softmax.
pub fn kl_row<T: Scalar>(logits: &[T], p: &[T]) -> (T, Vec<T>) {
    debug_assert_eq!(logits.len(), p.len());
    let lse = logsumexp_row(logits);
    let mut kl = T::ZERO;
    for (&pi, &zi) in p.iter().zip(logits) {
        if pi > T::ZERO {
            kl += pi * (pi.ln() - (zi - lse));
        }
    }
    let probs: Vec<T> = logits.iter().map(|&z| (z - lse).exp()).collect();
    (kl, probs)
}

/// Shannon entropy of a probability row in nats, with `0 ln 0 = 0`.
pub fn entropy_row<T: Scalar>(p: &[T]) -> T {
    let mut h = T::ZERO;
    for &x in p {
        if x > T::ZERO {
            h += -(x * x.ln());
        }
    }
    h
}

/// Index of the largest value (first one on ties).
pub fn argmax_row<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// RMS-normalize each row of `x` and scale by `gain`; writes `y`, returns
/// one inverse RMS per row. `eps` sits inside the square root.
pub fn rmsnorm_rows<T: Scalar>(
    x: &[T],
    gain: &[T],
    rows: usize,
    d: usize,
    eps: T,
    y: &mut [T],
) -> Vec<T> {
    debug_assert_eq!(x.len(), rows * d);
    debug_assert_eq!(gain.len(), d);
    debug_assert_eq!(y.len(), rows * d);
    let inv_d = T::ONE / T::from_f64(d as f64);
    let mut inv_rms = Vec::with_capacity(rows);
    for r in 0..rows {
        let xrow = &x[r * d..(r + 1) * d];
        let mut ss = T::ZERO;
        for &v in xrow {
            ss += v * v;
        }
        let ir = T::ONE / (ss * inv_d + eps).sqrt();
        inv_rms.push(ir);
        let yrow = &mut y[r * d..(r + 1) * d];
        for ((yv, &xv), &gv) in yrow.iter_mut().zip(xrow).zip(gain) {
            *yv = xv * ir * gv;
        }
    }
    inv_rms
}

/// Backward of [`rmsnorm_rows`]: accumulates into `dx` and `dgain`.
pub fn rmsnorm_backward<T: Scalar>(
    x: &[T],
    gain: &[T],
    inv_rms: &[T],
    g: &[T],
    rows: usize,
    d: usize,
    dx: &mut [T],
    dgain: &mut [T],
) {
    let inv_d = T::ONE / T::from_f64(d as f64);
    for r in 0..rows {
        let xrow = &x[r * d..(r + 1) * d];
        let grow = &g[r * d..(r + 1) * d];
        let ir = inv_rms[r];
        // s = sum_k g_k * gain_k * x_k
        let mut s = T::ZERO;
        for ((&gv, &gainv), &xv) in grow.iter().zip(gain).zip(xrow) {
            s += gv * gainv * xv;
        }
        let coef = ir * ir * inv_d * s;
        let dxrow = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            dxrow[j] += ir * (grow[j] * gain[j] - xrow[j] * coef);
            dgain[j] += grow[j] * xrow[j] * ir;
        }
    }
}

/// SiLU (`x * sigmoid(x)`) over a slice, writing `y`.
pub fn silu<T: Scalar>(x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        let sig = T::ONE / (T::ONE + (-xv).exp());
        *yv = xv * sig;
    }
}

/// Backward of [`silu`], accumulating into `dx`.
pub fn silu_backward<T: Scalar>(x: &[T], g: &[T], dx: &mut [T]) {
    for ((dv, &xv), &gv) in dx.iter_mut().zip(x).zip(g) {
        let sig = T::ONE / (T::ONE + (-xv).exp());
        *dv = *dv + gv * sig * (T::ONE + xv * (T::ONE - sig));
    }
}

/// Rotate query/key rows position-wise (rotary embedding), in place.
///
/// Row `i` gets position `start_pos + i`. Within each head, dimension pairs
/// `(2j, 2j+1)` rotate by `pos * ROPE_BASE^(-2j/head_dim)`. `inverse`
/// rotates by the negated angle — the transpose of the forward rotation,
/// which is what the backward pass needs.
pub fn rope_rows<T: Scalar>(
    x: &mut [T],
    rows: usize,
    d_model: usize,
    n_heads: usize,
    start_pos: usize,
    inverse: bool,
) {
    let head_dim = d_model / n_heads;
    let half = head_dim / 2;
    for r in 0..rows {
        let pos = (start_pos + r) as f64;
        let row = &mut x[r * d_model..(r + 1) * d_model];
        for h in 0..n_heads {
            let head = &mut row[h * head_dim..(h + 1) * head_dim];
            for j in 0..half {
                let freq = ROPE_BASE.powf(-2.0 * j as f64 / head_dim as f64);
                let mut angle = pos * freq;
                if inverse {
                    angle = -angle;
                }
                let (s, c) = (T::from_f64(angle.sin()), T::from_f64(angle.cos()));
                let (a, b) = (head[2 * j], head[2 * j + 1]);
                head[2 * j] = a * c - b * s;
                head[2 * j + 1] = a * s + b * c;
            }
        }
    }
}

/// Multi-head causal attention over full sequences.
///
/// `q`, `k`, `v` are `s x d_model` with rotary already applied to `q`/`k`.
/// Writes `out` (`s x d_model`) and `probs` (`n_heads x s x s`, dense, zero
/// above the diagonal). Scores scale by `1/sqrt(head_dim)`.
pub fn causal_attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    s: usize,
    n_heads: usize,
    head_dim: usize,
    out: &mut [T],
    probs: &mut [T],
) {
    let d = n_heads * head_dim;
    let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
    out.fill(T::ZERO);
    probs.fill(T::ZERO);
    for h in 0..n_heads {
        let hoff = h * head_dim;
        for i in 0..s {
            let qrow = &q[i * d + hoff..i * d + hoff + head_dim];
            let prow = &mut probs[h * s * s + i * s..h * s * s + i * s + i + 1];
            for (j, pv) in prow.iter_mut().enumerate() {
                let krow = &k[j * d + hoff..j * d + hoff + head_dim];
                let mut dot = T::ZERO;
                for (&qv, &kv) in qrow.iter().zip(krow) {
                    dot += qv * kv;
                }
                *pv = dot * scale;
            }
            softmax_row(prow, T::ONE);
            let orow = &mut out[i * d + hoff..i * d + hoff + head_dim];
            for (j, &p) in prow.iter().enumerate() {
                let vrow = &v[j * d + hoff..j * d + hoff + head_dim];
                for (ov, &vv) in orow.iter_mut().zip(vrow) {
                    *ov = *ov + p * vv;
                }
            }
        }
    }
}

/// Backward of [`causal_attention`]; accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn causal_attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &[T],
    s: usize,
    n_heads: usize,
    head_dim: usize,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let d = n_heads * head_dim;
    let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut ds = vec![T::ZERO; s];
    for h in 0..n_heads {
        let hoff = h * head_dim;
        for i in 0..s {
            let grow = &g[i * d + hoff..i * d + hoff + head_dim];
            let prow = &probs[h * s * s + i * s..h * s * s + i * s + i + 1];
            // dp_j = g . v_j, then softmax backward into ds.
            let mut dot_pd = T::ZERO;
            for (j, &p) in prow.iter().enumerate() {
                let vrow = &v[j * d + hoff..j * d + hoff + head_dim];
                let mut dp = T::ZERO;
                for (&gv, &vv) in grow.iter().zip(vrow) {
                    dp += gv * vv;
                }
                ds[j] = dp;
                dot_pd += p * dp;
            }
            for (j, &p) in prow.iter().enumerate() {
                ds[j] = p * (ds[j] - dot_pd);
            }
            // dv_j += p_j * g ; dq_i += ds_j * k_j * scale ; dk_j += ds_j * q_i * scale
            let qrow = &q[i * d + hoff..i * d + hoff + head_dim];
            for (j, &p) in prow.iter().enumerate() {
                let dvrow = &mut dv[j * d + hoff..j * d + hoff + head_dim];
                for (dvv, &gv) in dvrow.iter_mut().zip(grow) {
                    *dvv = *dvv + p * gv;
                }
                let dsj = ds[j] * scale;
                let krow = &k[j * d + hoff..j * d + hoff + head_dim];
                let dqrow = &mut dq[i * d + hoff..i * d + hoff + head_dim];
                for (dqv, &kv) in dqrow.iter_mut().zip(krow) {
                    *dqv = *dqv + dsj * kv;
                }
                let dkrow = &mut dk[j * d + hoff..j * d + hoff + head_dim];
                for (dkv, &qv) in dkrow.iter_mut().zip(qrow) {
                    *dkv = *dkv + dsj * qv;
                }
            }
        }
    }
}

/// Causal attention of `s_q` query rows against a key/value cache.
///
/// Query row `i` sits at absolute position `start_pos + i` and attends to
/// cache rows `0..=start_pos+i`; the cache must hold at least
/// `start_pos + s_q` rows. Rotary must already be applied (keys at their
/// absolute positions). With `s_k == s_q` and `start_pos == 0` this computes
/// bit for bit what [`causal_attention`] computes, which is what lets the
/// incremental decode path reproduce the full-sequence forward exactly.
#[allow(clippy::too_many_arguments)]
pub fn causal_attention_cached<T: Scalar>(
    q: &[T],
    k_cache: &[T],
    v_cache: &[T],
    s_q: usize,
    s_k: usize,
    start_pos: usize,
    n_heads: usize,
    head_dim: usize,
    out: &mut [T],
) {
    let d = n_heads * head_dim;
    debug_assert_eq!(q.len(), s_q * d);
    debug_assert!(k_cache.len() >= s_k * d && v_cache.len() >= s_k * d);
    debug_assert!(s_k >= start_pos + s_q);
    let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
    out.fill(T::ZERO);
    let mut scores = vec![T::ZERO; s_k];
    for h in 0..n_heads {
        let hoff = h * head_dim;
        for i in 0..s_q {
            let limit = start_pos + i;
            let qrow = &q[i * d + hoff..i * d + hoff + head_dim];
            let prow = &mut scores[..limit + 1];
            for (j, pv) in prow.iter_mut().enumerate() {
                let krow = &k_cache[j * d + hoff..j * d + hoff + head_dim];
                let mut dot = T::ZERO;
                for (&qv, &kv) in qrow.iter().zip(krow) {
                    dot += qv * kv;
                }
                *pv = dot * scale;
            }
            softmax_row(prow, T::ONE);
            let orow = &mut out[i * d + hoff..i * d + hoff + head_dim];
            for (j, &p) in prow.iter().enumerate() {
                let vrow = &v_cache[j * d + hoff..j * d + hoff + head_dim];
                for (ov, &vv) in orow.iter_mut().zip(vrow) {
                    *ov = *ov + p * vv;
                }
            }
        }
    }
}

/// Multi-head attention from token queries onto a gist pool.
///
/// Entry 0 is the zero entry (`zk`/`zv`), entries `1..=n` the pool rows of
/// `gk`/`gv`. No position rotation on either side. Scores scale by
/// `1/sqrt(head_dim)` and then by `inv_temp`. Writes `out` (`s x d_model`)
/// and `probs` (`s x n_heads x (n+1)`).
///
/// With `use_zero == false` the zero entry is excluded: the softmax runs
/// over the `n` pool entries only and `probs[.., 0]` is exactly zero, which
/// also silences every entry-0 term in the backward pass. Requires `n >= 1`
/// in that case.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention<T: Scalar>(
    q: &[T],
    gk: &[T],
    gv: &[T],
    zk: &[T],
    zv: &[T],
    s: usize,
    n: usize,
    n_heads: usize,
    head_dim: usize,
    inv_temp: T,
    use_zero: bool,
    out: &mut [T],
    probs: &mut [T],
) {
    let d = n_heads * head_dim;
    let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
    debug_assert_eq!(probs.len(), s * n_heads * (n + 1));
    debug_assert!(use_zero || n >= 1);
    out.fill(T::ZERO);
    for i in 0..s {
        for h in 0..n_heads {
            let hoff = h * head_dim;
            let qrow = &q[i * d + hoff..i * d + hoff + head_dim];
            let prow =
                &mut probs[(i * n_heads + h) * (n + 1)..(i * n_heads + h) * (n + 1) + n + 1];
            let first = if use_zero { 0 } else { 1 };
            prow[0] = T::ZERO;
            for (e, pv) in prow.iter_mut().enumerate().skip(first) {
                let krow = if e == 0 {
                    &zk[hoff..hoff + head_dim]
                } else {
                    &gk[(e - 1) * d + hoff..(e - 1) * d + hoff + head_dim]
                };
                let mut dot = T::ZERO;
                for (&qv, &kv) in qrow.iter().zip(krow) {
                    dot += qv * kv;
                }
                *pv = dot * scale;
            }
            softmax_row(&mut prow[first..], inv_temp);
            let orow = &mut out[i * d + hoff..i * d + hoff + head_dim];
            for (e, &p) in prow.iter().enumerate() {
                let vrow = if e == 0 {
                    &zv[hoff..hoff + head_dim]
                } else {
                    &gv[(e - 1) * d + hoff..(e - 1) * d + hoff + head_dim]
                };
                for (ov, &vv) in orow.iter_mut().zip(vrow) {
                    *ov = *ov + p * vv;
                }
            }
        }
    }
}

/// Backward of [`cross_attention`]; accumulates into the five gradients.
/// Pass zeroed (or running) buffers; `dzv` exists for completeness even
/// though the zero entry's value never learns. Works for both zero-entry
/// modes: with the zero entry excluded, `probs[.., 0] == 0` zeroes every
/// entry-0 term on its own.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention_backward<T: Scalar>(
    q: &[T],
    gk: &[T],
    gv: &[T],
    zk: &[T],
    zv: &[T],
    probs: &[T],
    g: &[T],
    s: usize,
    n: usize,
    n_heads: usize,
    head_dim: usize,
    inv_temp: T,
    dq: &mut [T],
    dgk: &mut [T],
    dgv: &mut [T],
    dzk: &mut [T],
    dzv: &mut [T],
) {
    let d = n_heads * head_dim;
    let scale = T::from_f64(1.0 / (head_dim as f64).sqrt()) * inv_temp;
    let mut ds = vec![T::ZERO; n + 1];
    for i in 0..s {
        for h in 0..n_heads {
            let hoff = h * head_dim;
            let grow = &g[i * d + hoff..i * d + hoff + head_dim];
            let prow = &probs[(i * n_heads + h) * (n + 1)..(i * n_heads + h) * (n + 1) + n + 1];
            let mut dot_pd = T::ZERO;
            for (e, &p) in prow.iter().enumerate() {
                let vrow = if e == 0 {
                    &zv[hoff..hoff + head_dim]
                } else {
                    &gv[(e - 1) * d + hoff..(e - 1) * d + hoff + head_dim]
                };
                let mut dp = T::ZERO;
                for (&gvv, &vv) in grow.iter().zip(vrow) {
                    dp += gvv * vv;
                }
                ds[e] = dp;
                dot_pd += p * dp;
            }
            for (e, &p) in prow.iter().enumerate() {
                ds[e] = p * (ds[e] - dot_pd);
            }
            let qrow = &q[i * d + hoff..i * d + hoff + head_dim];
            for (e, &p) in prow.iter().enumerate() {
                // value grad
                {
                    let dvrow = if e == 0 {
                        &mut dzv[hoff..hoff + head_dim]
                    } else {
                        &mut dgv[(e - 1) * d + hoff..(e - 1) * d + hoff + head_dim]
                    };
                    for (dvv, &gvv) in dvrow.iter_mut().zip(grow) {
                        *dvv = *dvv + p * gvv;
                    }
                }
                // score grad into q and keys
                let dse = ds[e] * scale;
                let krow = if e == 0 {
                    &zk[hoff..hoff + head_dim]
                } else {
                    &gk[(e - 1) * d + hoff..(e - 1) * d + hoff + head_dim]
                };
                let dqrow = &mut dq[i * d + hoff..i * d + hoff + head_dim];
                for (dqv, &kv) in dqrow.iter_mut().zip(krow) {
                    *dqv = *dqv + dse * kv;
                }
                let dkrow = if e == 0 {
                    &mut dzk[hoff..hoff + head_dim]
                } else {
                    &mut dgk[(e - 1) * d + hoff..(e - 1) * d + hoff + head_dim]
                };
                for (dkv, &qv) in dkrow.iter_mut().zip(qrow) {
                    *dkv = *dkv + dse * qv;
                }
            }
        }
    }
}
