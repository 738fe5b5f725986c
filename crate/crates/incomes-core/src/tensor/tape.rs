//! Reverse-mode tape.
//!
//! Eager evaluation: each op computes its value at construction and appends
//! one node. Node indices are creation-ordered, which makes creation order a
//! topological order — [`Tape::backward`] just walks the nodes in reverse,
//! accumulating gradients. Inputs always have smaller indices than the node
//! that consumes them; constructors enforce it by taking [`NodeId`]s handed
//! out by this tape.
//!
//! Gradients accumulate (`+=`) everywhere, so shared subexpressions and
//! repeated inputs are handled uniformly. `backward` may run once per tape.
//!
//! All heavy math delegates to [`kernels`], the same functions the
//! cache-based inference path uses — outputs of the two paths are therefore
//! bitwise comparable.

use super::kernels;
use super::scalar::Scalar;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to one node of a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        c: T,
    },
    AddN {
        xs: Vec<NodeId>,
    },
    Silu {
        a: NodeId,
    },
    RmsNorm {
        x: NodeId,
        gain: NodeId,
        inv_rms: Vec<T>,
    },
    Embed {
        table: NodeId,
        ids: Vec<u32>,
    },
    Rope {
        x: NodeId,
        n_heads: usize,
    },
    CausalAttn {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        probs: Vec<T>,
    },
    CrossAttn {
        q: NodeId,
        gk: NodeId,
        gv: NodeId,
        zk: NodeId,
        zv: NodeId,
        n_heads: usize,
        inv_temp: T,
        probs: Vec<T>,
    },
    SliceRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    CeRow {
        logits: NodeId,
        row: usize,
        target: usize,
        probs: Vec<T>,
    },
    KlRow {
        logits: NodeId,
        row: usize,
        teacher: Vec<T>,
        probs: Vec<T>,
    },
    SoftmaxT {
        a: NodeId,
        inv_temp: T,
    },
    MeanStack {
        xs: Vec<NodeId>,
    },
    NegLn {
        a: NodeId,
    },
    GoldenMass {
        q: NodeId,
        gk: NodeId,
        zk: NodeId,
        n_heads: usize,
        inv_temp: T,
        golden: usize,
        rows: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Vec<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Append-only compute graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, needs_grad: bool, op: Op<T>) -> NodeId {
        let grad = vec![T::ZERO; value.len()];
        self.nodes.push(Node {
            shape,
            value,
            grad,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.node(id).value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    /// Gradient buffer of a node (zeros until `backward` has run).
    pub fn grad(&self, id: NodeId) -> &[T] {
        &self.node(id).grad
    }

    /// Scalar value of a rank-0/len-1 node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.node(id).value[0]
    }

    /// Attention distributions recorded by a `cross_attn` or `golden_mass`
    /// node, in the layout the op documents. Empty for other ops.
    pub fn cross_probs(&self, id: NodeId) -> &[T] {
        match &self.node(id).op {
            Op::CrossAttn { probs, .. } => probs,
            Op::GoldenMass { probs, .. } => probs,
            _ => &[],
        }
    }

    // ---- leaves ------------------------------------------------------

    /// Leaf with explicit data. `needs_grad` marks it as a differentiation
    /// root — its gradient is retrievable after `backward`.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<T>, needs_grad: bool) -> Result<NodeId> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::Shape {
                op: "tape.leaf",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(self.push(shape.to_vec(), data, needs_grad, Op::Leaf))
    }

    /// Leaf copied from a tensor; learnability follows `requires_grad`.
    pub fn leaf_tensor(&mut self, t: &Tensor<T>) -> NodeId {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Non-learnable leaf.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<NodeId> {
        self.leaf(shape, data, false)
    }

    // ---- ops ---------------------------------------------------------

    fn binary_needs(&self, a: NodeId, b: NodeId) -> bool {
        self.node(a).needs_grad || self.node(b).needs_grad
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "tape.matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        kernels::matmul(&self.node(a).value, &self.node(b).value, &mut out, m, k, n);
        let ng = self.binary_needs(a, b);
        Ok(self.push(vec![m, n], out, ng, Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "tape.add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let value: Vec<T> = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.binary_needs(a, b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, ng, Op::Add { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let value: Vec<T> = self.node(a).value.iter().map(|&x| x * c).collect();
        let ng = self.node(a).needs_grad;
        let shape = self.shape(a).to_vec();
        self.push(shape, value, ng, Op::Scale { a, c })
    }

    /// Element-wise sum of same-shaped nodes.
    pub fn add_n(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::contract("add_n of zero nodes"))?;
        let shape = self.shape(first).to_vec();
        for &x in xs {
            if self.shape(x) != shape {
                return Err(Error::Shape {
                    op: "tape.add_n",
                    left: shape,
                    right: self.shape(x).to_vec(),
                });
            }
        }
        let mut value = vec![T::ZERO; self.node(first).value.len()];
        for &x in xs {
            for (dst, &src) in value.iter_mut().zip(&self.node(x).value) {
                *dst += src;
            }
        }
        let ng = xs.iter().any(|&x| self.node(x).needs_grad);
        Ok(self.push(shape, value, ng, Op::AddN { xs: xs.to_vec() }))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let mut value = vec![T::ZERO; self.node(a).value.len()];
        kernels::silu(&self.node(a).value, &mut value);
        let ng = self.node(a).needs_grad;
        let shape = self.shape(a).to_vec();
        self.push(shape, value, ng, Op::Silu { a })
    }

    /// Row-wise RMS norm with gain; `eps` sits inside the square root.
    pub fn rmsnorm(&mut self, x: NodeId, gain: NodeId, eps: T) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sg = self.shape(gain).to_vec();
        if sx.len() != 2 || sg != vec![sx[1]] {
            return Err(Error::Shape {
                op: "tape.rmsnorm",
                left: sx,
                right: sg,
            });
        }
        let (r, d) = (sx[0], sx[1]);
        let mut value = vec![T::ZERO; r * d];
        let inv_rms = kernels::rmsnorm_rows(
            &self.node(x).value,
            &self.node(gain).value,
            r,
            d,
            eps,
            &mut value,
        );
        let ng = self.binary_needs(x, gain);
        Ok(self.push(sx, value, ng, Op::RmsNorm { x, gain, inv_rms }))
    }

    /// Gather embedding rows for a token sequence.
    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::Shape {
                op: "tape.embed",
                left: st,
                right: vec![],
            });
        }
        let (vocab, d) = (st[0], st[1]);
        let mut value = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::Index {
                    what: "embed token id",
                    got: id,
                    limit: vocab,
                });
            }
            value.extend_from_slice(&self.node(table).value[id * d..(id + 1) * d]);
        }
        let ng = self.node(table).needs_grad;
        Ok(self.push(
            vec![ids.len(), d],
            value,
            ng,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Rotary rotation of query/key rows, positions `0..rows`.
    pub fn rope(&mut self, x: NodeId, n_heads: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[1] % n_heads != 0 || (sx[1] / n_heads) % 2 != 0 {
            return Err(Error::Shape {
                op: "tape.rope",
                left: sx,
                right: vec![n_heads],
            });
        }
        let mut value = self.node(x).value.clone();
        kernels::rope_rows(&mut value, sx[0], sx[1], n_heads, 0, false);
        let ng = self.node(x).needs_grad;
        Ok(self.push(sx, value, ng, Op::Rope { x, n_heads }))
    }

    /// Multi-head causal self-attention; `q`/`k` are expected pre-rotated.
    pub fn causal_attn(&mut self, q: NodeId, k: NodeId, v: NodeId, n_heads: usize) -> Result<NodeId> {
        let sq = self.shape(q).to_vec();
        for other in [k, v] {
            if self.shape(other) != sq {
                return Err(Error::Shape {
                    op: "tape.causal_attn",
                    left: sq,
                    right: self.shape(other).to_vec(),
                });
            }
        }
        if sq.len() != 2 || sq[1] % n_heads != 0 {
            return Err(Error::Shape {
                op: "tape.causal_attn",
                left: sq,
                right: vec![n_heads],
            });
        }
        let (s, d) = (sq[0], sq[1]);
        let hd = d / n_heads;
        let mut out = vec![T::ZERO; s * d];
        let mut probs = vec![T::ZERO; n_heads * s * s];
        kernels::causal_attention(
            &self.node(q).value,
            &self.node(k).value,
            &self.node(v).value,
            s,
            n_heads,
            hd,
            &mut out,
            &mut probs,
        );
        let ng = self.node(q).needs_grad || self.node(k).needs_grad || self.node(v).needs_grad;
        Ok(self.push(
            vec![s, d],
            out,
            ng,
            Op::CausalAttn {
                q,
                k,
                v,
                n_heads,
                probs,
            },
        ))
    }

    /// Attention from token queries onto a gist pool (entry 0 = zero entry).
    /// `probs` layout: `s x n_heads x (n+1)`, retrievable via
    /// [`Tape::cross_probs`]. With `use_zero == false` the zero entry is
    /// excluded from the softmax (its probability column stays exactly 0),
    /// which requires a non-empty pool.
    #[allow(clippy::too_many_arguments)]
    pub fn cross_attn(
        &mut self,
        q: NodeId,
        gk: NodeId,
        gv: NodeId,
        zk: NodeId,
        zv: NodeId,
        n_heads: usize,
        temperature: T,
        use_zero: bool,
    ) -> Result<NodeId> {
        if !(temperature > T::ZERO) || !temperature.is_finite() {
            return Err(Error::param(
                "temperature",
                format!("must be finite and > 0, got {temperature}"),
            ));
        }
        let sq = self.shape(q).to_vec();
        let sgk = self.shape(gk).to_vec();
        if sq.len() != 2 || sq[1] % n_heads != 0 {
            return Err(Error::Shape {
                op: "tape.cross_attn",
                left: sq,
                right: vec![n_heads],
            });
        }
        let (s, d) = (sq[0], sq[1]);
        if sgk.len() != 2 || sgk[1] != d || self.shape(gv) != sgk.as_slice() {
            return Err(Error::Shape {
                op: "tape.cross_attn",
                left: sgk,
                right: self.shape(gv).to_vec(),
            });
        }
        let n = sgk[0];
        if !use_zero && n == 0 {
            return Err(Error::contract(
                "cross_attn without the zero entry needs a non-empty pool",
            ));
        }
        for z in [zk, zv] {
            if self.node(z).value.len() != d {
                return Err(Error::Shape {
                    op: "tape.cross_attn",
                    left: vec![d],
                    right: self.shape(z).to_vec(),
                });
            }
        }
        let hd = d / n_heads;
        let inv_temp = T::ONE / temperature;
        let mut out = vec![T::ZERO; s * d];
        let mut probs = vec![T::ZERO; s * n_heads * (n + 1)];
        kernels::cross_attention(
            &self.node(q).value,
            &self.node(gk).value,
            &self.node(gv).value,
            &self.node(zk).value,
            &self.node(zv).value,
            s,
            n,
            n_heads,
            hd,
            inv_temp,
            use_zero,
            &mut out,
            &mut probs,
        );
        let ng = [q, gk, gv, zk, zv]
            .iter()
            .any(|&x| self.node(x).needs_grad);
        Ok(self.push(
            vec![s, d],
            out,
            ng,
            Op::CrossAttn {
                q,
                gk,
                gv,
                zk,
                zv,
                n_heads,
                inv_temp,
                probs,
            },
        ))
    }

    /// Gather a subset of rows of a matrix.
    pub fn slice_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::Shape {
                op: "tape.slice_rows",
                left: sx,
                right: vec![],
            });
        }
        let (r, d) = (sx[0], sx[1]);
        let mut value = Vec::with_capacity(rows.len() * d);
        for &row in rows {
            if row >= r {
                return Err(Error::Index {
                    what: "slice_rows row",
                    got: row,
                    limit: r,
                });
            }
            value.extend_from_slice(&self.node(x).value[row * d..(row + 1) * d]);
        }
        let ng = self.node(x).needs_grad;
        Ok(self.push(
            vec![rows.len(), d],
            value,
            ng,
            Op::SliceRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Cross entropy of one row of a logits matrix; scalar output.
    pub fn ce_row(&mut self, logits: NodeId, row: usize, target: usize) -> Result<NodeId> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 {
            return Err(Error::Shape {
                op: "tape.ce_row",
                left: sl,
                right: vec![],
            });
        }
        let (r, c) = (sl[0], sl[1]);
        if row >= r {
            return Err(Error::Index {
                what: "ce_row row",
                got: row,
                limit: r,
            });
        }
        if target >= c {
            return Err(Error::Index {
                what: "ce_row target",
                got: target,
                limit: c,
            });
        }
        let (loss, probs) =
            kernels::cross_entropy_row(&self.node(logits).value[row * c..(row + 1) * c], target);
        let ng = self.node(logits).needs_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            ng,
            Op::CeRow {
                logits,
                row,
                target,
                probs,
            },
        ))
    }

    /// `KL(teacher || softmax(logits[row]))` against a fixed teacher
    /// distribution; scalar output.
    pub fn kl_row(&mut self, logits: NodeId, row: usize, teacher: Vec<T>) -> Result<NodeId> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 {
            return Err(Error::Shape {
                op: "tape.kl_row",
                left: sl,
                right: vec![],
            });
        }
        let (r, c) = (sl[0], sl[1]);
        if row >= r {
            return Err(Error::Index {
                what: "kl_row row",
                got: row,
                limit: r,
            });
        }
        if teacher.len() != c {
            return Err(Error::Shape {
                op: "tape.kl_row",
                left: vec![c],
                right: vec![teacher.len()],
            });
        }
        let mut sum = T::ZERO;
        for &p in &teacher {
            sum += p;
        }
        // Single-precision softmax over a wide vocabulary rounds the sum
        // by a few ulps per entry; the tolerance covers that while still
        // rejecting unnormalized inputs.
        if (sum - T::ONE).abs().to_f64() > 1e-4 {
            return Err(Error::contract(format!(
                "kl_row: teacher distribution must sum to 1 within 1e-4, got {sum}"
            )));
        }
        let (loss, probs) =
            kernels::kl_row(&self.node(logits).value[row * c..(row + 1) * c], &teacher);
        let ng = self.node(logits).needs_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            ng,
            Op::KlRow {
                logits,
                row,
                teacher,
                probs,
            },
        ))
    }

    /// Last-axis softmax at temperature.
    pub fn softmax_t(&mut self, a: NodeId, temperature: T) -> Result<NodeId> {
        if !(temperature > T::ZERO) || !temperature.is_finite() {
            return Err(Error::param(
                "temperature",
                format!("must be finite and > 0, got {temperature}"),
            ));
        }
        let shape = self.shape(a).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::contract("softmax_t on a rank-0 node"))?;
        let inv_temp = T::ONE / temperature;
        let mut value = self.node(a).value.clone();
        for row in value.chunks_mut(cols) {
            kernels::softmax_row(row, inv_temp);
        }
        let ng = self.node(a).needs_grad;
        Ok(self.push(shape, value, ng, Op::SoftmaxT { a, inv_temp }))
    }

    /// Mean of scalar nodes; scalar output.
    pub fn mean_stack(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::contract("mean_stack of zero nodes"));
        }
        let mut sum = T::ZERO;
        for &x in xs {
            if self.node(x).value.len() != 1 {
                return Err(Error::contract(format!(
                    "mean_stack expects scalars, got shape {:?}",
                    self.shape(x)
                )));
            }
            sum += self.node(x).value[0];
        }
        let mean = sum / T::from_f64(xs.len() as f64);
        let ng = xs.iter().any(|&x| self.node(x).needs_grad);
        Ok(self.push(vec![1], vec![mean], ng, Op::MeanStack { xs: xs.to_vec() }))
    }

    /// `-ln(x)` of a positive scalar node.
    pub fn neg_ln(&mut self, a: NodeId) -> Result<NodeId> {
        if self.node(a).value.len() != 1 {
            return Err(Error::contract("neg_ln expects a scalar node"));
        }
        let x = self.node(a).value[0];
        if !(x > T::ZERO) {
            return Err(Error::NonFinite(format!("neg_ln of non-positive value {x}")));
        }
        let ng = self.node(a).needs_grad;
        Ok(self.push(vec![1], vec![-(x.ln())], ng, Op::NegLn { a }))
    }

    /// Mean attention mass on pool entry `golden` over the given query rows
    /// and all heads; scalar in `(0, 1]`. Recomputes scores from `q`, `gk`,
    /// `zk` (values are irrelevant to the distribution).
    #[allow(clippy::too_many_arguments)]
    pub fn golden_mass(
        &mut self,
        q: NodeId,
        gk: NodeId,
        zk: NodeId,
        n_heads: usize,
        temperature: T,
        golden: usize,
        rows: &[usize],
        use_zero: bool,
    ) -> Result<NodeId> {
        if !(temperature > T::ZERO) || !temperature.is_finite() {
            return Err(Error::param(
                "temperature",
                format!("must be finite and > 0, got {temperature}"),
            ));
        }
        let sq = self.shape(q).to_vec();
        let sgk = self.shape(gk).to_vec();
        if sq.len() != 2 || sgk.len() != 2 || sgk[1] != sq[1] || sq[1] % n_heads != 0 {
            return Err(Error::Shape {
                op: "tape.golden_mass",
                left: sq,
                right: sgk,
            });
        }
        let (s, d) = (sq[0], sq[1]);
        let n = sgk[0];
        if golden >= n {
            return Err(Error::Index {
                what: "golden_mass entry",
                got: golden,
                limit: n,
            });
        }
        for &row in rows {
            if row >= s {
                return Err(Error::Index {
                    what: "golden_mass row",
                    got: row,
                    limit: s,
                });
            }
        }
        if rows.is_empty() {
            return Err(Error::contract("golden_mass with no rows"));
        }
        let hd = d / n_heads;
        let inv_temp = T::ONE / temperature;
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        // probs laid out rows.len() x n_heads x (n+1)
        let mut probs = vec![T::ZERO; rows.len() * n_heads * (n + 1)];
        let qv = &self.node(q).value;
        let gkv = &self.node(gk).value;
        let zkv = &self.node(zk).value;
        let mut mean = T::ZERO;
        let first = if use_zero { 0 } else { 1 };
        for (ri, &row) in rows.iter().enumerate() {
            for h in 0..n_heads {
                let hoff = h * hd;
                let qrow = &qv[row * d + hoff..row * d + hoff + hd];
                let prow = &mut probs
                    [(ri * n_heads + h) * (n + 1)..(ri * n_heads + h) * (n + 1) + n + 1];
                for (e, pv) in prow.iter_mut().enumerate().skip(first) {
                    let krow = if e == 0 {
                        &zkv[hoff..hoff + hd]
                    } else {
                        &gkv[(e - 1) * d + hoff..(e - 1) * d + hoff + hd]
                    };
                    let mut dot = T::ZERO;
                    for (&a, &b) in qrow.iter().zip(krow) {
                        dot += a * b;
                    }
                    *pv = dot * scale;
                }
                kernels::softmax_row(&mut prow[first..], inv_temp);
                mean += prow[golden + 1];
            }
        }
        mean = mean / T::from_f64((rows.len() * n_heads) as f64);
        let ng = [q, gk, zk].iter().any(|&x| self.node(x).needs_grad);
        Ok(self.push(
            vec![1],
            vec![mean],
            ng,
            Op::GoldenMass {
                q,
                gk,
                zk,
                n_heads,
                inv_temp,
                golden,
                rows: rows.to_vec(),
                probs,
            },
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse-accumulate gradients from a scalar loss node.
    ///
    /// # Errors
    /// Contract error if the loss is not a scalar or `backward` already ran
    /// on this tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.backward_seeded(loss, T::ONE)
    }

    /// [`Tape::backward`] with an explicit seed, used when a downstream
    /// tape hands gradients across a bridge leaf.
    pub fn backward_seeded(&mut self, loss: NodeId, seed: T) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(Error::contract(
                "backward may run only once per tape",
            ));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad[0] += seed;
        self.backward_from(loss)
    }

    /// Seed several nodes at once (bridged gradients), then sweep.
    pub fn backward_multi(&mut self, seeds: &[(NodeId, Vec<T>)]) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract(
                "backward may run only once per tape",
            ));
        }
        self.backward_done = true;
        let mut top = 0usize;
        for (id, g) in seeds {
            if g.len() != self.node(*id).value.len() {
                return Err(Error::Shape {
                    op: "tape.backward_multi",
                    left: self.shape(*id).to_vec(),
                    right: vec![g.len()],
                });
            }
            for (dst, &src) in self.nodes[id.0].grad.iter_mut().zip(g) {
                *dst += src;
            }
            top = top.max(id.0);
        }
        self.backward_from(NodeId(top))
    }

    fn backward_from(&mut self, top: NodeId) -> Result<()> {
        for idx in (0..=top.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &rest[0];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let k = before[a.0].shape[1];
                    let mut da = vec![T::ZERO; m * k];
                    let mut db = vec![T::ZERO; k * n];
                    kernels::matmul_grad_a_acc(&node.grad, &before[b.0].value, &mut da, m, k, n);
                    kernels::matmul_grad_b_acc(&before[a.0].value, &node.grad, &mut db, m, k, n);
                    acc(&mut before[a.0].grad, &da);
                    acc(&mut before[b.0].grad, &db);
                }
                Op::Add { a, b } => {
                    let g = node.grad.clone();
                    acc(&mut before[a.0].grad, &g);
                    acc(&mut before[b.0].grad, &g);
                }
                Op::Scale { a, c } => {
                    let c = *c;
                    let scaled: Vec<T> = node.grad.iter().map(|&g| g * c).collect();
                    acc(&mut before[a.0].grad, &scaled);
                }
                Op::AddN { xs } => {
                    let g = node.grad.clone();
                    for x in xs {
                        acc(&mut before[x.0].grad, &g);
                    }
                }
                Op::Silu { a } => {
                    let mut dx = vec![T::ZERO; node.grad.len()];
                    kernels::silu_backward(&before[a.0].value, &node.grad, &mut dx);
                    acc(&mut before[a.0].grad, &dx);
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let (r, d) = (node.shape[0], node.shape[1]);
                    let mut dx = vec![T::ZERO; r * d];
                    let mut dgain = vec![T::ZERO; d];
                    kernels::rmsnorm_backward(
                        &before[x.0].value,
                        &before[gain.0].value,
                        inv_rms,
                        &node.grad,
                        r,
                        d,
                        &mut dx,
                        &mut dgain,
                    );
                    acc(&mut before[x.0].grad, &dx);
                    acc(&mut before[gain.0].grad, &dgain);
                }
                Op::Embed { table, ids } => {
                    let d = node.shape[1];
                    let tgrad = &mut before[table.0].grad;
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = &mut tgrad[id as usize * d..(id as usize + 1) * d];
                        let src = &node.grad[i * d..(i + 1) * d];
                        for (dv, &sv) in dst.iter_mut().zip(src) {
                            *dv = *dv + sv;
                        }
                    }
                }
                Op::Rope { x, n_heads } => {
                    // Rotation is orthogonal: dL/dx = R^T g = rotation by -angle.
                    let mut g = node.grad.clone();
                    kernels::rope_rows(&mut g, node.shape[0], node.shape[1], *n_heads, 0, true);
                    acc(&mut before[x.0].grad, &g);
                }
                Op::CausalAttn {
                    q,
                    k,
                    v,
                    n_heads,
                    probs,
                } => {
                    let (s, d) = (node.shape[0], node.shape[1]);
                    let hd = d / n_heads;
                    let mut dq = vec![T::ZERO; s * d];
                    let mut dk = vec![T::ZERO; s * d];
                    let mut dv = vec![T::ZERO; s * d];
                    kernels::causal_attention_backward(
                        &before[q.0].value,
                        &before[k.0].value,
                        &before[v.0].value,
                        probs,
                        &node.grad,
                        s,
                        *n_heads,
                        hd,
                        &mut dq,
                        &mut dk,
                        &mut dv,
                    );
                    acc(&mut before[q.0].grad, &dq);
                    acc(&mut before[k.0].grad, &dk);
                    acc(&mut before[v.0].grad, &dv);
                }
                Op::CrossAttn {
                    q,
                    gk,
                    gv,
                    zk,
                    zv,
                    n_heads,
                    inv_temp,
                    probs,
                } => {
                    let (s, d) = (node.shape[0], node.shape[1]);
                    let n = before[gk.0].shape[0];
                    let hd = d / n_heads;
                    let mut dq = vec![T::ZERO; s * d];
                    let mut dgk = vec![T::ZERO; n * d];
                    let mut dgv = vec![T::ZERO; n * d];
                    let mut dzk = vec![T::ZERO; d];
                    let mut dzv = vec![T::ZERO; d];
                    kernels::cross_attention_backward(
                        &before[q.0].value,
                        &before[gk.0].value,
                        &before[gv.0].value,
                        &before[zk.0].value,
                        &before[zv.0].value,
                        probs,
                        &node.grad,
                        s,
                        n,
                        *n_heads,
                        hd,
                        *inv_temp,
                        &mut dq,
                        &mut dgk,
                        &mut dgv,
                        &mut dzk,
                        &mut dzv,
                    );
                    acc(&mut before[q.0].grad, &dq);
                    acc(&mut before[gk.0].grad, &dgk);
                    acc(&mut before[gv.0].grad, &dgv);
                    acc(&mut before[zk.0].grad, &dzk);
                    acc(&mut before[zv.0].grad, &dzv);
                }
                Op::SliceRows { x, rows } => {
                    let d = node.shape[1];
                    let xg = &mut before[x.0].grad;
                    for (i, &row) in rows.iter().enumerate() {
                        let dst = &mut xg[row * d..(row + 1) * d];
                        let src = &node.grad[i * d..(i + 1) * d];
                        for (dv, &sv) in dst.iter_mut().zip(src) {
                            *dv = *dv + sv;
                        }
                    }
                }
                Op::CeRow {
                    logits,
                    row,
                    target,
                    probs,
                } => {
                    let go = node.grad[0];
                    let c = probs.len();
                    let dst = &mut before[logits.0].grad[row * c..(row + 1) * c];
                    for (j, (dv, &p)) in dst.iter_mut().zip(probs).enumerate() {
                        let indicator = if j == *target { T::ONE } else { T::ZERO };
                        *dv = *dv + go * (p - indicator);
                    }
                }
                Op::KlRow {
                    logits,
                    row,
                    teacher,
                    probs,
                } => {
                    let go = node.grad[0];
                    let c = probs.len();
                    let dst = &mut before[logits.0].grad[row * c..(row + 1) * c];
                    for ((dv, &p), &tp) in dst.iter_mut().zip(probs).zip(teacher) {
                        *dv = *dv + go * (p - tp);
                    }
                }
                Op::SoftmaxT { a, inv_temp } => {
                    let cols = *node.shape.last().unwrap();
                    let mut dx = vec![T::ZERO; node.grad.len()];
                    for (r, (grow, yrow)) in node
                        .grad
                        .chunks(cols)
                        .zip(node.value.chunks(cols))
                        .enumerate()
                    {
                        let mut dot = T::ZERO;
                        for (&g, &y) in grow.iter().zip(yrow) {
                            dot += g * y;
                        }
                        let dxrow = &mut dx[r * cols..(r + 1) * cols];
                        for ((dv, &g), &y) in dxrow.iter_mut().zip(grow).zip(yrow) {
                            *dv = (g - dot) * y * *inv_temp;
                        }
                    }
                    acc(&mut before[a.0].grad, &dx);
                }
                Op::MeanStack { xs } => {
                    let g = node.grad[0] / T::from_f64(xs.len() as f64);
                    for x in xs {
                        before[x.0].grad[0] += g;
                    }
                }
                Op::NegLn { a } => {
                    let x = before[a.0].value[0];
                    before[a.0].grad[0] += -(node.grad[0] / x);
                }
                Op::GoldenMass {
                    q,
                    gk,
                    zk,
                    n_heads,
                    inv_temp,
                    golden,
                    rows,
                    probs,
                } => {
                    let d = before[q.0].shape[1];
                    let n = before[gk.0].shape[0];
                    let hd = d / n_heads;
                    let scale = T::from_f64(1.0 / (hd as f64).sqrt()) * *inv_temp;
                    let go = node.grad[0] / T::from_f64((rows.len() * n_heads) as f64);
                    let mut dq = vec![T::ZERO; before[q.0].value.len()];
                    let mut dgk = vec![T::ZERO; n * d];
                    let mut dzk = vec![T::ZERO; d];
                    let qv = &before[q.0].value;
                    let gkv = &before[gk.0].value;
                    let zkv = &before[zk.0].value;
                    for (ri, &row) in rows.iter().enumerate() {
                        for h in 0..*n_heads {
                            let hoff = h * hd;
                            let prow = &probs[(ri * n_heads + h) * (n + 1)
                                ..(ri * n_heads + h) * (n + 1) + n + 1];
                            let pg = prow[*golden + 1];
                            let qrow = &qv[row * d + hoff..row * d + hoff + hd];
                            // d p_g / d score_e = p_g (delta_{e,g+1} - p_e)
                            for (e, &pe) in prow.iter().enumerate() {
                                let delta = if e == *golden + 1 { T::ONE } else { T::ZERO };
                                let dse = go * pg * (delta - pe) * scale;
                                let krow = if e == 0 {
                                    &zkv[hoff..hoff + hd]
                                } else {
                                    &gkv[(e - 1) * d + hoff..(e - 1) * d + hoff + hd]
                                };
                                let dqrow = &mut dq[row * d + hoff..row * d + hoff + hd];
                                for (dv, &kv) in dqrow.iter_mut().zip(krow) {
                                    *dv = *dv + dse * kv;
                                }
                                let dkrow = if e == 0 {
                                    &mut dzk[hoff..hoff + hd]
                                } else {
                                    &mut dgk[(e - 1) * d + hoff..(e - 1) * d + hoff + hd]
                                };
                                for (dv, &qvv) in dkrow.iter_mut().zip(qrow) {
                                    *dv = *dv + dse * qvv;
                                }
                            }
                        }
                    }
                    acc(&mut before[q.0].grad, &dq);
                    acc(&mut before[gk.0].grad, &dgk);
                    acc(&mut before[zk.0].grad, &dzk);
                }
            }
        }
        Ok(())
    }
}

fn acc<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
