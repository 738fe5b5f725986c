//! Decoder-only transformer with optional gist cross-attention.
//!
//! The base model is a pre-norm decoder stack: RMSNorm -> rotary causal
//! self-attention -> residual add, RMSNorm -> SiLU feed-forward -> residual
//! add, with a final norm and an unembedding matrix. [`ModelState::extend`]
//! grafts cross-attention blocks onto a chosen set of layers; at those
//! layers the hidden state additionally queries a pool of compressed edit
//! entries and the cross output is added to the self-attention output.
//!
//! Extension is exactly identity at init: the cross output projection
//! starts at zero, so an extended model computes the same function as its
//! base until training moves the new weights. Entry 0 of every pool is the
//! "attend to nothing" entry: a learnable key paired with a value pinned at
//! zero, giving queries a way to produce a zero cross output on demand.

pub mod checkpoint;
pub mod graph;
pub mod infer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::scalar::Scalar;
use crate::tensor::Tensor;

fn default_true() -> bool {
    true
}
fn default_train_temp() -> f64 {
    1.0
}
fn default_infer_temp() -> f64 {
    0.45
}

/// Architecture and attention-temperature settings. Everything that changes
/// the function a checkpoint computes lives here; run-time knobs (batch
/// sizes, learning rates) do not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    /// Layers that carry a cross-attention block, ascending.
    pub cross_layers: Vec<usize>,
    /// Include the zero entry in every pool softmax.
    #[serde(default = "default_true")]
    pub zero_gist: bool,
    /// When set, pool keys are rotated at this fixed position and cross
    /// queries at their true positions; when unset the cross path is
    /// position-free.
    #[serde(default)]
    pub gist_key_position: Option<u32>,
    /// Cross-attention temperature used while training.
    #[serde(default = "default_train_temp")]
    pub train_temperature: f64,
    /// Cross-attention temperature used at inference.
    #[serde(default = "default_infer_temp")]
    pub infer_temperature: f64,
}

impl ModelConfig {
    /// The larger back half of the layer stack, the default placement for
    /// cross-attention blocks.
    pub fn second_half(n_layers: usize) -> Vec<usize> {
        (n_layers / 2..n_layers).collect()
    }

    /// # Errors
    /// Param error naming the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::param("vocab_size", "must be at least 4"));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::param(
                "d_model/n_heads",
                format!("{} must be a positive multiple of {}", self.d_model, self.n_heads),
            ));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::param(
                "n_heads",
                format!("head dim {} must be even for rotary pairs", self.head_dim()),
            ));
        }
        if self.n_layers == 0 {
            return Err(Error::param("n_layers", "must be positive"));
        }
        if self.max_seq_len < 2 {
            return Err(Error::param("max_seq_len", "must be at least 2"));
        }
        for w in self.cross_layers.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::param("cross_layers", "must be strictly ascending"));
            }
        }
        if let Some(&last) = self.cross_layers.last() {
            if last >= self.n_layers {
                return Err(Error::param(
                    "cross_layers",
                    format!("layer {last} out of range for {} layers", self.n_layers),
                ));
            }
        }
        for (name, t) in [
            ("train_temperature", self.train_temperature),
            ("infer_temperature", self.infer_temperature),
        ] {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::param(name, format!("must be finite and > 0, got {t}")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_hidden(&self) -> usize {
        4 * self.d_model
    }

    /// The reserved gist token, always the last vocabulary id.
    pub fn gist_token_id(&self) -> u32 {
        (self.vocab_size - 1) as u32
    }

    pub fn is_cross_layer(&self, layer: usize) -> bool {
        self.cross_layers.binary_search(&layer).is_ok()
    }

    /// Canonical JSON used wherever two artifacts must agree on the config
    /// (checkpoint headers, pool fingerprints). Field order is fixed by the
    /// struct, so equal configs serialize to equal bytes.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Self-attention projections of one layer, all `d_model x d_model`.
#[derive(Debug, Clone)]
pub struct AttnParams<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

/// One decoder layer.
#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub norm1: Tensor<T>,
    pub attn: AttnParams<T>,
    pub norm2: Tensor<T>,
    pub ffn_in: Tensor<T>,
    pub ffn_out: Tensor<T>,
}

/// Cross-attention block grafted onto one layer.
///
/// `zero_value` is pinned at zero and never learnable; `zero_key` learns
/// where "attend to nothing" should sit in key space.
#[derive(Debug, Clone)]
pub struct CrossParams<T> {
    pub layer: usize,
    pub wq: Tensor<T>,
    pub wo: Tensor<T>,
    pub zero_key: Tensor<T>,
    pub zero_value: Tensor<T>,
}

/// All parameters of a model. `cross` is empty until [`ModelState::extend`].
#[derive(Debug, Clone)]
pub struct ModelState<T> {
    pub embed: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    pub unembed: Tensor<T>,
    pub cross: Vec<CrossParams<T>>,
}

impl<T: Scalar> ModelState<T> {
    /// Fresh base model. Every parameter draws from its own named stream of
    /// `seed`, so adding parameters never shifts existing ones.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let h = cfg.ffn_hidden();
        let proj_std = 1.0 / (d as f64).sqrt();
        let mat = |name: &str, rows: usize, cols: usize, std: f64| {
            let mut r = rng::stream(seed, name);
            Tensor::randn(&[rows, cols], std, &mut r).with_grad()
        };
        let ones = |dim: usize| {
            Tensor::from_vec(&[dim], vec![T::ONE; dim])
                .expect("gain shape")
                .with_grad()
        };
        let layers = (0..cfg.n_layers)
            .map(|l| LayerParams {
                norm1: ones(d),
                attn: AttnParams {
                    wq: mat(&format!("layers.{l}.attn.wq"), d, d, proj_std),
                    wk: mat(&format!("layers.{l}.attn.wk"), d, d, proj_std),
                    wv: mat(&format!("layers.{l}.attn.wv"), d, d, proj_std),
                    wo: mat(&format!("layers.{l}.attn.wo"), d, d, proj_std),
                },
                norm2: ones(d),
                ffn_in: mat(&format!("layers.{l}.ffn_in"), d, h, proj_std),
                ffn_out: mat(&format!("layers.{l}.ffn_out"), h, d, 1.0 / (h as f64).sqrt()),
            })
            .collect();
        Ok(ModelState {
            embed: mat("embed", cfg.vocab_size, d, 0.02),
            layers,
            final_norm: ones(d),
            unembed: mat("unembed", d, cfg.vocab_size, 0.02),
            cross: Vec::new(),
        })
    }

    /// Graft cross-attention blocks onto `cfg.cross_layers`.
    ///
    /// Query projections start as copies of each layer's self-attention
    /// query projection; output projections start at zero, so the extended
    /// model is the base model until training. Zero keys draw at
    /// `1/sqrt(head_dim)` scale; zero values are pinned at zero and stay
    /// out of the learnable set.
    ///
    /// # Errors
    /// Contract error if already extended; param error on an invalid config.
    pub fn extend(&mut self, cfg: &ModelConfig, seed: u64) -> Result<()> {
        cfg.validate()?;
        if !self.cross.is_empty() {
            return Err(Error::contract("model already carries cross-attention blocks"));
        }
        if cfg.cross_layers.is_empty() {
            return Err(Error::param("cross_layers", "extension needs at least one layer"));
        }
        let d = cfg.d_model;
        let key_std = 1.0 / (cfg.head_dim() as f64).sqrt();
        for &l in &cfg.cross_layers {
            let mut kr = rng::stream(seed, &format!("cross.{l}.zero_key"));
            self.cross.push(CrossParams {
                layer: l,
                wq: self.layers[l].attn.wq.clone(),
                wo: Tensor::zeros(&[d, d]).with_grad(),
                zero_key: Tensor::randn(&[d], key_std, &mut kr).with_grad(),
                zero_value: Tensor::zeros(&[d]),
            });
        }
        Ok(())
    }

    pub fn is_extended(&self) -> bool {
        !self.cross.is_empty()
    }

    /// Parameters in canonical order (base first, cross blocks after), each
    /// with its canonical name. Checkpoints, graph binding, and gradient
    /// harvesting all walk this order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![("embed".into(), &self.embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.norm1"), &layer.norm1));
            out.push((format!("layers.{l}.attn.wq"), &layer.attn.wq));
            out.push((format!("layers.{l}.attn.wk"), &layer.attn.wk));
            out.push((format!("layers.{l}.attn.wv"), &layer.attn.wv));
            out.push((format!("layers.{l}.attn.wo"), &layer.attn.wo));
            out.push((format!("layers.{l}.norm2"), &layer.norm2));
            out.push((format!("layers.{l}.ffn_in"), &layer.ffn_in));
            out.push((format!("layers.{l}.ffn_out"), &layer.ffn_out));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("unembed".into(), &self.unembed));
        for c in &self.cross {
            let l = c.layer;
            out.push((format!("cross.{l}.wq"), &c.wq));
            out.push((format!("cross.{l}.wo"), &c.wo));
            out.push((format!("cross.{l}.zero_key"), &c.zero_key));
            out.push((format!("cross.{l}.zero_value"), &c.zero_value));
        }
        out
    }

    /// Mutable twin of [`ModelState::params`], same order and names.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![("embed".into(), &mut self.embed)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{l}.norm1"), &mut layer.norm1));
            out.push((format!("layers.{l}.attn.wq"), &mut layer.attn.wq));
            out.push((format!("layers.{l}.attn.wk"), &mut layer.attn.wk));
            out.push((format!("layers.{l}.attn.wv"), &mut layer.attn.wv));
            out.push((format!("layers.{l}.attn.wo"), &mut layer.attn.wo));
            out.push((format!("layers.{l}.norm2"), &mut layer.norm2));
            out.push((format!("layers.{l}.ffn_in"), &mut layer.ffn_in));
            out.push((format!("layers.{l}.ffn_out"), &mut layer.ffn_out));
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("unembed".into(), &mut self.unembed));
        for c in &mut self.cross {
            let l = c.layer;
            out.push((format!("cross.{l}.wq"), &mut c.wq));
            out.push((format!("cross.{l}.wo"), &mut c.wo));
            out.push((format!("cross.{l}.zero_key"), &mut c.zero_key));
            out.push((format!("cross.{l}.zero_value"), &mut c.zero_value));
        }
        out
    }

    /// Number of learnable scalars.
    pub fn learnable_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Strip learnability everywhere (teacher copies never train).
    pub fn freeze(&mut self) {
        for (_, t) in self.params_mut() {
            t.detach();
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.params_mut() {
            t.zero_grad();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|(_, t)| t.all_finite())
    }

    /// Element-type conversion (used to build f64 twins for gradient
    /// checks). Learnability carries over; gradients reset.
    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            embed: self.embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    norm1: l.norm1.cast(),
                    attn: AttnParams {
                        wq: l.attn.wq.cast(),
                        wk: l.attn.wk.cast(),
                        wv: l.attn.wv.cast(),
                        wo: l.attn.wo.cast(),
                    },
                    norm2: l.norm2.cast(),
                    ffn_in: l.ffn_in.cast(),
                    ffn_out: l.ffn_out.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            unembed: self.unembed.cast(),
            cross: self
                .cross
                .iter()
                .map(|c| CrossParams {
                    layer: c.layer,
                    wq: c.wq.cast(),
                    wo: c.wo.cast(),
                    zero_key: c.zero_key.cast(),
                    zero_value: c.zero_value.cast(),
                })
                .collect(),
        }
    }
}

/// Learnable scalars an extension adds for one cross layer: two `d x d`
/// projections plus the zero key.
pub fn extension_learnable_per_layer(d_model: usize) -> usize {
    2 * d_model * d_model + d_model
}

/// Pool contents laid out for attention: one `n x d_model` key matrix and
/// one value matrix per cross layer (ascending layer order). Keys are
/// already positioned (rotated at the fixed key position if the config asks
/// for one); values are raw.
#[derive(Debug, Clone)]
pub struct PoolTensors<T> {
    pub n: usize,
    /// `keys[i]` pairs with `cfg.cross_layers[i]`.
    pub keys: Vec<Vec<T>>,
    pub values: Vec<Vec<T>>,
}

impl<T: Scalar> PoolTensors<T> {
    /// Empty pool (cross attention sees only the zero entry).
    pub fn empty(n_cross: usize) -> Self {
        PoolTensors {
            n: 0,
            keys: vec![Vec::new(); n_cross],
            values: vec![Vec::new(); n_cross],
        }
    }
}

/// Per-layer key/value rows kept while decoding. Keys are stored after
/// rotation at their absolute positions.
#[derive(Debug, Clone)]
pub struct KVCache<T> {
    pub k: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    len: usize,
}

impl<T: Scalar> KVCache<T> {
    pub fn new(n_layers: usize) -> Self {
        KVCache {
            k: vec![Vec::new(); n_layers],
            v: vec![Vec::new(); n_layers],
            len: 0,
        }
    }

    /// Rows cached so far (the next token's absolute position).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub(crate) fn bump(&mut self, rows: usize) {
        self.len += rows;
    }
}
