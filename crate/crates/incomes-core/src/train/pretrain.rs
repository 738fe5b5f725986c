//! Base-model pretraining on the synthetic mixture.
//!
//! Plain next-token training over mixture sequences. The base model must
//! answer in-context queries from statement blocks before edit training
//! means anything; [`conditioned_recall_gate`] measures exactly that on
//! held-out pairs.

use crate::data::cases::{gen_cases, CaseMix};
use crate::data::pretrain::PretrainSampler;
use crate::data::world::{Split, World};
use crate::data::{format_example, CaseKind};
use crate::model::graph::{bind, forward_graph, harvest_grads};
use crate::model::infer::greedy_decode;
use crate::model::{ModelConfig, ModelState};
use crate::tensor::optim::{Adam, AdamConfig, LrSchedule};
use crate::tensor::tape::Tape;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Sequences per optimizer step.
    pub batch: usize,
    /// Largest statement block in conditioned sequences.
    pub max_edits: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
}

/// Runs next-token pretraining in place. The state must be unextended:
/// the cross-attention blocks never see base pretraining. Returns the
/// mean loss of each step; `on_step` observes `(step, loss, lr)`.
pub fn pretrain(
    state: &mut ModelState<f32>,
    cfg: &ModelConfig,
    world: &World,
    pc: &PretrainConfig,
    mut on_step: impl FnMut(usize, f64, f64),
) -> Result<Vec<f64>> {
    if state.is_extended() {
        return Err(Error::contract("pretraining runs on the unextended base model"));
    }
    if pc.steps == 0 || pc.batch == 0 {
        return Err(Error::param("pretrain", "steps and batch must be positive"));
    }
    let mut sampler = PretrainSampler::new(world, pc.seed, pc.max_edits);
    if sampler.max_len() > cfg.max_seq_len {
        return Err(Error::Capacity { len: sampler.max_len(), max: cfg.max_seq_len });
    }

    let lens: Vec<usize> = state
        .params()
        .iter()
        .filter(|(_, p)| p.requires_grad())
        .map(|(_, p)| p.len())
        .collect();
    let mut adam: Adam<f32> = Adam::new(AdamConfig::new(pc.schedule.clone()), &lens);
    let mut losses = Vec::with_capacity(pc.steps);

    for step in 0..pc.steps {
        let mut tape: Tape<f32> = Tape::new();
        let gp = bind(&mut tape, state);
        let mut ce_nodes = Vec::new();
        for _ in 0..pc.batch {
            let ex = sampler.sample();
            let rows: Vec<usize> = (0..ex.tokens.len() - 1).collect();
            let fw = forward_graph(&mut tape, &gp, cfg, &ex.tokens, None, &rows)?;
            for (i, &t) in ex.tokens[1..].iter().enumerate() {
                ce_nodes.push(tape.ce_row(fw.logits, i, t as usize)?);
            }
        }
        let loss = tape.mean_stack(&ce_nodes)?;
        let loss_val = tape.scalar(loss) as f64;
        if !loss_val.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss at step {step}")));
        }
        tape.backward(loss)?;
        harvest_grads(&tape, &gp, state)?;
        {
            let mut params = state.params_mut();
            let mut pairs: Vec<(&mut [f32], &[f32])> = params
                .iter_mut()
                .filter(|(_, p)| p.requires_grad())
                .map(|(_, p)| p.data_and_grad_mut().expect("gradient present"))
                .collect();
            adam.step(&mut pairs, step)?;
        }
        state.zero_grads();
        on_step(step, loss_val, pc.schedule.lr(step));
        losses.push(loss_val);
    }
    Ok(losses)
}

/// Fraction of held-out single-edit conditioned queries the model answers
/// exactly, with the statement spelled out in the prompt. This gates
/// whether the base model is worth extending.
pub fn conditioned_recall_gate(
    state: &ModelState<f32>,
    cfg: &ModelConfig,
    world: &World,
    cases: usize,
    seed: u64,
) -> Result<f64> {
    let set = gen_cases(world, Split::Eval, CaseMix::only(CaseKind::Recall), cases, seed, true)?;
    let mut hits = 0usize;
    for c in &set {
        let f = format_example(&[c.edits[0].tokens.as_slice()], &c.query, &c.answer);
        let pred = greedy_decode(state, cfg, f.prompt(), None, c.answer.len())?;
        if pred == c.answer {
            hits += 1;
        }
    }
    Ok(hits as f64 / cases as f64)
}
