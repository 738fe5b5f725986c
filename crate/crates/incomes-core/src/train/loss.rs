//! The combined training objective.
//!
//! One step sees a shared pool of edits and a batch of examples. Every
//! pool edit is recompressed on a side tape bound to the current
//! parameters; the captured key/value rows cross to the main tape as
//! bridge leaves, so the pool the students attend to is a differentiable
//! function of the parameters. The loss per example is
//!
//!   mean(w_i * ce_i) + mean(kl_i)  over the loss span,
//!
//! with `w_i` the teacher's conditioned/unconditioned gap and `kl_i` the
//! divergence from the teacher's conditioned distribution, plus an
//! optional auxiliary `-ln(mass on related entries)` over answer rows.
//! After backward, bridge gradients seed the side tape, so parameter
//! gradients include the path through compression.

use std::collections::BTreeMap;

use crate::data::{format_example, Case, EditSpec};
use crate::model::graph::{
    bind, compress_graph, forward_graph, harvest_grads, GraphPool,
};
use crate::model::{ModelConfig, ModelState};
use crate::tensor::kernels;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Scalar;
use crate::train::teacher::TeacherOutput;
use crate::{Error, Result};

/// What the loss needs from an example: which pool entries are its own,
/// and the query/answer tail it is scored on.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub related: Vec<u64>,
    pub query: Vec<u32>,
    pub answer: Vec<u32>,
}

impl From<&Case> for TrainExample {
    fn from(c: &Case) -> TrainExample {
        TrainExample {
            related: c.related.clone(),
            query: c.query.clone(),
            answer: c.answer.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossOptions<T> {
    /// Score query tokens as well as answer tokens.
    pub loss_on_query: bool,
    /// Weight of the auxiliary related-mass term; zero disables it.
    pub golden_weight: T,
    /// Cross-attention temperature during training forwards.
    pub temperature: T,
}

impl<T: Scalar> LossOptions<T> {
    pub fn for_config(cfg: &ModelConfig) -> LossOptions<T> {
        LossOptions {
            loss_on_query: true,
            golden_weight: T::ZERO,
            temperature: T::from_f64(cfg.train_temperature),
        }
    }
}

/// Scalars observed during one step, averaged as noted.
#[derive(Clone, Copy, Debug, Default)]
pub struct BatchStats {
    pub total: f64,
    pub weighted_ce: f64,
    pub kl: f64,
    pub golden_aux: f64,
    /// Unweighted student cross entropy per span token.
    pub student_ce: f64,
    /// Mean detached-entry probability over answer rows, heads, layers.
    pub zero_mass: f64,
    /// Mean total probability on related entries, where defined.
    pub golden_mass: f64,
    /// Mean entropy of the cross-attention rows, in nats.
    pub attn_entropy: f64,
    pub tokens: usize,
}

/// Runs one batch: compression, student forwards, the combined loss, and
/// (when `compute_grads`) backward through both tapes, accumulating into
/// the state's gradients. Examples share the pool built from `pool_edits`.
pub fn batch_step<T: Scalar>(
    state: &mut ModelState<T>,
    cfg: &ModelConfig,
    pool_edits: &[EditSpec],
    examples: &[(TrainExample, TeacherOutput<T>)],
    opts: &LossOptions<T>,
    compute_grads: bool,
) -> Result<BatchStats> {
    if examples.is_empty() {
        return Err(Error::contract("batch with no examples"));
    }
    if !state.is_extended() {
        return Err(Error::contract("training requires the cross-attention extension"));
    }
    if !(opts.golden_weight >= T::ZERO) {
        return Err(Error::param("golden_weight", "must be nonnegative"));
    }
    let mut index: BTreeMap<u64, usize> = BTreeMap::new();
    for (i, e) in pool_edits.iter().enumerate() {
        if e.tokens.is_empty() {
            return Err(Error::contract("pool edit with no tokens"));
        }
        if index.insert(e.id, i).is_some() {
            return Err(Error::contract("duplicate edit id in the pool"));
        }
    }
    for (ex, _) in examples {
        if ex.answer.is_empty() {
            return Err(Error::contract("example with no answer tokens"));
        }
        for id in &ex.related {
            if !index.contains_key(id) {
                return Err(Error::contract("pool is missing a related edit"));
            }
        }
    }

    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let n = pool_edits.len();
    let nc = cfg.cross_layers.len();

    let mut main: Tape<T> = Tape::new();
    let gp = bind(&mut main, state);

    // Recompress every pool edit on the side tape.
    let mut side: Tape<T> = Tape::new();
    let sgp = bind(&mut side, state);
    let mut edit_nodes: Vec<Vec<(NodeId, NodeId)>> = Vec::with_capacity(n);
    for e in pool_edits {
        let mut toks = e.tokens.clone();
        toks.push(cfg.gist_token_id());
        edit_nodes.push(compress_graph(&mut side, &sgp, cfg, &toks)?);
    }

    // Bridge the captured rows onto the main tape, positioning keys the
    // same way the inference pool assembly does.
    let mut keys = Vec::with_capacity(nc);
    let mut values = Vec::with_capacity(nc);
    for li in 0..nc {
        let mut kd = Vec::with_capacity(n * d);
        let mut vd = Vec::with_capacity(n * d);
        for nodes in &edit_nodes {
            let (kn, vn) = nodes[li];
            let mut krow = side.value(kn).to_vec();
            if let Some(p) = cfg.gist_key_position {
                kernels::rope_rows(&mut krow, 1, d, heads, p as usize, false);
            }
            kd.extend_from_slice(&krow);
            vd.extend_from_slice(side.value(vn));
        }
        keys.push(main.leaf(&[n, d], kd, true)?);
        values.push(main.leaf(&[n, d], vd, true)?);
    }
    let gpool = GraphPool { n, keys: keys.clone(), values: values.clone() };

    let mut wce_nodes = Vec::new();
    let mut kl_nodes = Vec::new();
    let mut golden_nodes = Vec::new();
    let mut stats = BatchStats::default();
    let mut attn_rows = 0usize;
    let mut golden_rows = 0usize;

    for (ex, tout) in examples {
        let f = format_example(&[], &ex.query, &ex.answer);
        let span = f.loss_span(opts.loss_on_query);
        if tout.weights.len() != span.len() || tout.cond_probs.len() != span.len() {
            return Err(Error::contract("teacher output does not cover the loss span"));
        }
        let rows: Vec<usize> = span.iter().map(|&j| j - 1).collect();
        let fw = forward_graph(
            &mut main,
            &gp,
            cfg,
            &f.tokens,
            Some((&gpool, opts.temperature)),
            &rows,
        )?;
        for (i, &j) in span.iter().enumerate() {
            let ce = main.ce_row(fw.logits, i, f.tokens[j] as usize)?;
            stats.student_ce += main.scalar(ce).to_f64();
            wce_nodes.push(main.scale(ce, tout.weights[i]));
            kl_nodes.push(main.kl_row(fw.logits, i, tout.cond_probs[i].clone())?);
        }
        stats.tokens += span.len();

        let ans_rows: Vec<usize> = (f.answer_start - 1..f.tokens.len() - 1).collect();
        if opts.golden_weight > T::ZERO && !ex.related.is_empty() {
            for (ci, tr) in fw.cross.iter().enumerate() {
                let mut masses = Vec::with_capacity(ex.related.len());
                for id in &ex.related {
                    masses.push(main.golden_mass(
                        tr.q,
                        gpool.keys[ci],
                        gp.cross[ci].zero_key,
                        heads,
                        opts.temperature,
                        index[id],
                        &ans_rows,
                        cfg.zero_gist,
                    )?);
                }
                let total_mass = main.add_n(&masses)?;
                golden_nodes.push(main.neg_ln(total_mass)?);
            }
        }
        for tr in &fw.cross {
            let probs = main.cross_probs(tr.attn);
            for &r in &ans_rows {
                for h in 0..heads {
                    let off = (r * heads + h) * (n + 1);
                    let prow = &probs[off..off + n + 1];
                    stats.zero_mass += prow[0].to_f64();
                    stats.attn_entropy += kernels::entropy_row(prow).to_f64();
                    attn_rows += 1;
                    if !ex.related.is_empty() {
                        let mut g = T::ZERO;
                        for id in &ex.related {
                            g += prow[index[id] + 1];
                        }
                        stats.golden_mass += g.to_f64();
                        golden_rows += 1;
                    }
                }
            }
        }
    }

    let wce_term = main.mean_stack(&wce_nodes)?;
    let kl_term = main.mean_stack(&kl_nodes)?;
    let mut total = main.add(wce_term, kl_term)?;
    if !golden_nodes.is_empty() {
        let g = main.mean_stack(&golden_nodes)?;
        stats.golden_aux = main.scalar(g).to_f64();
        let scaled = main.scale(g, opts.golden_weight);
        total = main.add(total, scaled)?;
    }

    stats.weighted_ce = main.scalar(wce_term).to_f64();
    stats.kl = main.scalar(kl_term).to_f64();
    stats.total = main.scalar(total).to_f64();
    stats.student_ce /= stats.tokens as f64;
    if attn_rows > 0 {
        stats.zero_mass /= attn_rows as f64;
        stats.attn_entropy /= attn_rows as f64;
    }
    if golden_rows > 0 {
        stats.golden_mass /= golden_rows as f64;
    }
    if !stats.total.is_finite() {
        return Err(Error::NonFinite(format!("step loss {}", stats.total)));
    }

    if compute_grads {
        main.backward(total)?;
        harvest_grads(&main, &gp, state)?;
        if n > 0 {
            let mut seeds: Vec<(NodeId, Vec<T>)> = Vec::with_capacity(2 * n * nc);
            for li in 0..nc {
                let gk = main.grad(keys[li]);
                let gv = main.grad(values[li]);
                for (e, nodes) in edit_nodes.iter().enumerate() {
                    let mut krow = gk[e * d..(e + 1) * d].to_vec();
                    if let Some(p) = cfg.gist_key_position {
                        // Keys were rotated between the tapes; the rotation
                        // is orthogonal, so its transpose is its inverse.
                        kernels::rope_rows(&mut krow, 1, d, heads, p as usize, true);
                    }
                    let (kn, vn) = nodes[li];
                    seeds.push((kn, krow));
                    seeds.push((vn, gv[e * d..(e + 1) * d].to_vec()));
                }
            }
            side.backward_multi(&seeds)?;
            harvest_grads(&side, &sgp, state)?;
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::checkpoint::state_digest;
    
    use crate::train::teacher::Teacher;

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

    fn student(c: &ModelConfig, seed: u64) -> ModelState<f32> {
        let mut s = ModelState::<f32>::init(c, seed).unwrap();
        s.extend(c, seed ^ 0x5eed).unwrap();
        s
    }

    fn pool() -> Vec<EditSpec> {
        vec![
            EditSpec { id: 1, tokens: vec![5, 6, 7] },
            EditSpec { id: 2, tokens: vec![8, 9] },
        ]
    }

    fn batch(
        teacher: &mut Teacher<f32>,
        opts: &LossOptions<f32>,
    ) -> Vec<(TrainExample, TeacherOutput<f32>)> {
        let exs = vec![
            TrainExample { related: vec![1], query: vec![10, 11], answer: vec![12] },
            TrainExample { related: vec![], query: vec![13], answer: vec![14, 15] },
        ];
        exs.into_iter()
            .map(|ex| {
                let edits: Vec<Vec<u32>> = ex
                    .related
                    .iter()
                    .map(|&id| pool().iter().find(|e| e.id == id).unwrap().tokens.clone())
                    .collect();
                let refs: Vec<&[u32]> = edits.iter().map(|t| t.as_slice()).collect();
                let t = teacher
                    .output(&refs, &ex.query, &ex.answer, opts.loss_on_query)
                    .unwrap();
                (ex, t)
            })
            .collect()
    }

    #[test]
    fn a_step_is_deterministic_and_fills_gradients() {
        let c = cfg();
        let mut opts = LossOptions::for_config(&c);
        opts.golden_weight = 0.1;
        let mut teacher = Teacher::new(ModelState::<f32>::init(&c, 7).unwrap(), c.clone());
        let examples = batch(&mut teacher, &opts);
        let mut s1 = student(&c, 7);
        let mut s2 = student(&c, 7);
        let a = batch_step(&mut s1, &c, &pool(), &examples, &opts, true).unwrap();
        let b = batch_step(&mut s2, &c, &pool(), &examples, &opts, true).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(state_digest(&s1), state_digest(&s2));
        let mut any = false;
        for (name, p) in s1.params() {
            if let Some(g) = p.grad() {
                assert!(g.iter().all(|x| x.is_finite()), "{name}");
                any |= g.iter().any(|&x| x != 0.0);
            }
        }
        assert!(any, "no gradient reached any parameter");
        assert!(a.zero_mass > 0.0 && a.zero_mass < 1.0);
        assert!(a.golden_mass > 0.0);
        assert!(a.golden_aux > 0.0);
    }

    #[test]
    fn unrelated_examples_contribute_zero_weighted_ce() {
        let c = cfg();
        let opts = LossOptions::for_config(&c);
        let mut teacher = Teacher::new(ModelState::<f32>::init(&c, 9).unwrap(), c.clone());
        let ex = TrainExample { related: vec![], query: vec![4, 5], answer: vec![6] };
        let t = teacher.output(&[], &ex.query, &ex.answer, true).unwrap();

        // A freshly extended student computes exactly the teacher's
        // distribution (the cross output projection starts at zero), so
        // distillation starts at (numerically) zero divergence.
        let mut s = student(&c, 9);
        let stats =
            batch_step(&mut s, &c, &pool(), &[(ex.clone(), t.clone())], &opts, false).unwrap();
        assert_eq!(stats.weighted_ce, 0.0);
        assert!(stats.kl.abs() < 1e-6, "fresh student diverged: {}", stats.kl);

        // Disturb the cross output projection and divergence appears.
        let mut s2 = student(&c, 9);
        for (name, p) in s2.params_mut() {
            if name.ends_with(".wo") && name.starts_with("cross.") {
                for x in p.data_mut() {
                    *x += 0.5;
                }
            }
        }
        let stats2 = batch_step(&mut s2, &c, &pool(), &[(ex, t)], &opts, false).unwrap();
        assert!(stats2.kl > 1e-4, "perturbed student did not diverge: {}", stats2.kl);
        assert_eq!(stats2.weighted_ce, 0.0);
    }

    #[test]
    fn pool_and_teacher_mismatches_are_rejected() {
        let c = cfg();
        let opts = LossOptions::for_config(&c);
        let mut teacher = Teacher::new(ModelState::<f32>::init(&c, 3).unwrap(), c.clone());
        let ex = TrainExample { related: vec![99], query: vec![4], answer: vec![5] };
        let t = teacher.output(&[], &ex.query, &ex.answer, true).unwrap();
        let mut s = student(&c, 3);
        let err = batch_step(&mut s, &c, &pool(), &[(ex, t.clone())], &opts, false)
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");

        let mut dup = pool();
        dup[1].id = 1;
        let ex2 = TrainExample { related: vec![1], query: vec![4], answer: vec![5] };
        let err2 =
            batch_step(&mut s, &c, &dup, &[(ex2, t)], &opts, false).unwrap_err();
        assert!(matches!(err2, Error::Contract(_)), "{err2}");
    }
}
