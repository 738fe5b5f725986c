//! In-context editing via gist compression.
//!
//! One crate, six layers, each built on the previous:
//!
//! * [`tensor`] — flat tensors, shared kernels, a reverse-mode tape, Adam,
//!   and the finite-difference oracle the op tests check against.
//! * [`model`] — a decoder-only transformer whose upper layers carry an
//!   extra attention path onto a pool of compressed edits.
//! * [`gist`] — compression of a rendered edit into one key/value entry per
//!   cross layer, pools of such entries, and their on-disk format.
//! * [`train`] — the editing trainer: a frozen teacher scores each token's
//!   edit-sensitivity, the student distills the teacher's edit-conditioned
//!   behaviour while reading edits only through the pool.
//! * [`calib`] — entropy-matching temperature calibration and attention
//!   probes.
//! * [`eval`] — a synthetic fact-editing benchmark: world generation,
//!   pooled and in-context prediction, scaling sweeps, and an encode-cost
//!   harness.

pub mod data;
pub mod error;
pub mod gist;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{cross_entropy, kl_divergence, matmul, softmax_t, Scalar, Tensor};
