//! Frozen reference passes.
//!
//! The teacher is a frozen copy of the base model. For each example it
//! runs twice over the shared sequence format: once with the related edit
//! statements spelled out in the prefix (conditioned) and once without
//! (unconditioned). The gap between the two cross entropies marks the
//! tokens an edit actually changes; the conditioned distributions are the
//! distillation targets. With no related edits the two passes coincide,
//! so the weights are exactly zero and the target is base behavior.

use std::collections::HashMap;

use crate::data::format_example;
use crate::model::infer::sequence_logits;
use crate::model::{ModelConfig, ModelState};
use crate::tensor::kernels;
use crate::tensor::Scalar;
use crate::Result;

/// Per-token teacher view over an example's loss span.
#[derive(Clone, Debug)]
pub struct TeacherOutput<T> {
    /// `max(0, ce_unconditioned - ce_conditioned)` per span token.
    pub weights: Vec<T>,
    /// Conditioned next-token distribution per span token (full vocab).
    pub cond_probs: Vec<Vec<T>>,
    pub ce_cond: Vec<T>,
    pub ce_uncond: Vec<T>,
}

#[derive(Clone)]
struct CachedRows<T> {
    probs: Vec<Vec<T>>,
    ce: Vec<T>,
}

/// A frozen model plus a per-sequence output cache. Repeated examples
/// (and the unconditioned halves of locality examples) hit the cache.
pub struct Teacher<T: Scalar> {
    state: ModelState<T>,
    cfg: ModelConfig,
    cache: HashMap<(Vec<u32>, Vec<usize>), CachedRows<T>>,
}

const CACHE_CAP: usize = 8192;

impl<T: Scalar> Teacher<T> {
    pub fn new(mut state: ModelState<T>, cfg: ModelConfig) -> Teacher<T> {
        state.freeze();
        Teacher { state, cfg, cache: HashMap::new() }
    }

    pub fn state(&self) -> &ModelState<T> {
        &self.state
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Both teacher passes for one example. `edits` are the related edit
    /// statements (possibly empty), `query`/`answer` the example tail.
    pub fn output(
        &mut self,
        edits: &[&[u32]],
        query: &[u32],
        answer: &[u32],
        loss_on_query: bool,
    ) -> Result<TeacherOutput<T>> {
        let uncond = format_example(&[], query, answer);
        let span = uncond.loss_span(loss_on_query);
        let rows_u: Vec<usize> = span.iter().map(|&j| j - 1).collect();

        let cond = format_example(edits, query, answer);
        let off = cond.query_start - uncond.query_start;
        let rows_c: Vec<usize> = span.iter().map(|&j| j + off - 1).collect();
        debug_assert!(span
            .iter()
            .all(|&j| cond.tokens[j + off] == uncond.tokens[j]));

        let u = self.rows(&uncond.tokens, &rows_u)?;
        let c = self.rows(&cond.tokens, &rows_c)?;
        let weights = u
            .ce
            .iter()
            .zip(&c.ce)
            .map(|(&cu, &cc)| (cu - cc).maxv(T::ZERO))
            .collect();
        Ok(TeacherOutput {
            weights,
            cond_probs: c.probs,
            ce_cond: c.ce,
            ce_uncond: u.ce,
        })
    }

    fn rows(&mut self, tokens: &[u32], rows: &[usize]) -> Result<CachedRows<T>> {
        let key = (tokens.to_vec(), rows.to_vec());
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit.clone());
        }
        let v = self.cfg.vocab_size;
        let logits = sequence_logits(&self.state, &self.cfg, tokens, None, Some(rows))?;
        let mut probs = Vec::with_capacity(rows.len());
        let mut ce = Vec::with_capacity(rows.len());
        for (i, &r) in rows.iter().enumerate() {
            let target = tokens[r + 1] as usize;
            let (loss, p) = kernels::cross_entropy_row(&logits[i * v..(i + 1) * v], target);
            ce.push(loss);
            probs.push(p);
        }
        let out = CachedRows { probs, ce };
        if self.cache.len() >= CACHE_CAP {
            self.cache.clear();
        }
        self.cache.insert(key, out.clone());
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelState;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 48,
            cross_layers: vec![1],
            zero_gist: true,
            gist_key_position: None,
            train_temperature: 1.0,
            infer_temperature: 0.45,
        }
    }

    #[test]
    fn no_related_edits_means_exactly_zero_weights() {
        let c = cfg();
        let mut t = Teacher::new(ModelState::<f64>::init(&c, 3).unwrap(), c.clone());
        let out = t.output(&[], &[5, 6], &[7], true).unwrap();
        assert!(out.weights.iter().all(|&w| w == 0.0));
        assert_eq!(out.ce_cond, out.ce_uncond);
    }

    #[test]
    fn weights_are_nonnegative_and_spans_line_up() {
        let c = cfg();
        let mut t = Teacher::new(ModelState::<f64>::init(&c, 4).unwrap(), c.clone());
        let e1: Vec<u32> = vec![10, 11, 12];
        let out = t.output(&[&e1], &[5, 6], &[7, 8], false).unwrap();
        assert_eq!(out.weights.len(), 2);
        assert_eq!(out.cond_probs.len(), 2);
        assert_eq!(out.cond_probs[0].len(), c.vocab_size);
        assert!(out.weights.iter().all(|&w| w >= 0.0));
        for p in &out.cond_probs {
            let s: f64 = p.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cache_returns_identical_rows() {
        let c = cfg();
        let mut t = Teacher::new(ModelState::<f64>::init(&c, 5).unwrap(), c.clone());
        let e1: Vec<u32> = vec![9, 10];
        let a = t.output(&[&e1], &[4, 5], &[6], true).unwrap();
        let b = t.output(&[&e1], &[4, 5], &[6], true).unwrap();
        assert_eq!(a.ce_cond, b.ce_cond);
        assert_eq!(a.cond_probs, b.cond_probs);
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn teacher_parameters_are_frozen() {
        let c = cfg();
        let t = Teacher::new(ModelState::<f64>::init(&c, 6).unwrap(), c.clone());
        for (_, p) in t.state().params() {
            assert!(!p.requires_grad());
        }
    }
}
