//! Mixture sampler for base-model pretraining.
//!
//! Four streams teach the skills the editing stages build on: answering
//! queries from an in-context statement block (conditioned), following
//! two-step chains stated in context, plain fact statements, and
//! unconditioned base-fact recall. Statements in conditioned streams use
//! ephemeral random objects, so the only way to answer is to read the
//! block; unconditioned answers come from the base triples, so base
//! knowledge ends up in the weights.

use crate::data::world::{Split, World, N_ENTITIES, N_RELATIONS};
use crate::data::{format_example, Formatted};
use crate::rng::{self, Rng};
use rand::Rng as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PretrainKind {
    ConditionedQa,
    MultiHopQa,
    Fact,
    UnconditionedQa,
}

#[derive(Clone, Debug)]
pub struct PretrainExample {
    pub kind: PretrainKind,
    pub tokens: Vec<u32>,
}

/// Draws pretraining sequences. Queried pairs always come from the
/// training split; evaluation pairs are never asked about.
pub struct PretrainSampler<'w> {
    world: &'w World,
    rng: Rng,
    max_edits: usize,
    train_triples: Vec<(u32, u16, u32)>,
}

const RATE_CONDITIONED: f64 = 0.4;
const RATE_MULTI_HOP: f64 = 0.2;
const RATE_FACT: f64 = 0.2;

impl<'w> PretrainSampler<'w> {
    pub fn new(world: &'w World, seed: u64, max_edits: usize) -> PretrainSampler<'w> {
        assert!(max_edits >= 2, "conditioned stream needs at least two statements");
        let train_triples = world
            .triples()
            .iter()
            .filter(|(&(s, r), _)| world.pair_split(s, r) == Split::Train)
            .map(|(&(s, r), &o)| (s, r, o))
            .collect();
        PretrainSampler { world, rng: rng::stream(seed, "pretrain"), max_edits, train_triples }
    }

    /// Upper bound on sampled sequence length, for sizing model capacity.
    pub fn max_len(&self) -> usize {
        let stmt = self
            .world
            .relations()
            .iter()
            .flat_map(|r| r.templates())
            .map(|t| t.len())
            .max()
            .unwrap();
        // [BOS] + m * (stmt + SEP) + SEP + hop query + [ANS] + answer
        1 + self.max_edits * (stmt + 1) + 1 + 4 + 1 + 1
    }

    pub fn sample(&mut self) -> PretrainExample {
        let u: f64 = self.rng.gen();
        if u < RATE_CONDITIONED {
            self.conditioned()
        } else if u < RATE_CONDITIONED + RATE_MULTI_HOP {
            self.multi_hop()
        } else if u < RATE_CONDITIONED + RATE_MULTI_HOP + RATE_FACT {
            self.fact()
        } else {
            self.unconditioned()
        }
    }

    fn random_entity(&mut self, avoid: &[u32]) -> u32 {
        loop {
            let e = self.world.entity(self.rng.gen_range(0..N_ENTITIES));
            if !avoid.contains(&e) {
                return e;
            }
        }
    }

    fn train_pair(&mut self, taken: &[(u32, u16)]) -> (u32, u16) {
        loop {
            let (s, r, _) = self.train_triples[self.rng.gen_range(0..self.train_triples.len())];
            if !taken.contains(&(s, r)) {
                return (s, r);
            }
        }
    }

    fn render(&mut self, r: u16, s: u32, o: u32) -> Vec<u32> {
        let tpl = self.rng.gen_range(0..self.world.relations()[r as usize].templates().len());
        self.world.render_edit(r, tpl, s, o)
    }

    fn conditioned(&mut self) -> PretrainExample {
        let m = self.rng.gen_range(1..=self.max_edits);
        let mut pairs: Vec<(u32, u16)> = Vec::with_capacity(m);
        let mut statements = Vec::with_capacity(m);
        let mut objects = Vec::with_capacity(m);
        for _ in 0..m {
            let (s, r) = self.train_pair(&pairs);
            let o = self.random_entity(&[s]);
            statements.push(self.render(r, s, o));
            pairs.push((s, r));
            objects.push(o);
        }
        let j = self.rng.gen_range(0..m);
        let (s, r) = pairs[j];
        let query = if self.rng.gen::<bool>() {
            self.world.query_canonical(r, s)
        } else {
            self.world.query_alias(r, s)
        };
        let refs: Vec<&[u32]> = statements.iter().map(|t| t.as_slice()).collect();
        let f = format_example(&refs, &query, &[objects[j]]);
        PretrainExample { kind: PretrainKind::ConditionedQa, tokens: f.tokens }
    }

    fn multi_hop(&mut self) -> PretrainExample {
        let (s0, r1) = self.train_pair(&[]);
        let o1 = self.random_entity(&[s0]);
        let r2 = loop {
            let r2 = self.rng.gen_range(0..N_RELATIONS as u16);
            if (o1, r2) != (s0, r1) {
                break r2;
            }
        };
        let o2 = self.random_entity(&[o1]);
        let e1 = self.render(r1, s0, o1);
        let e2 = self.render(r2, o1, o2);
        let query = self.world.query_hop(s0, r1, r2);
        let f = format_example(&[&e1, &e2], &query, &[o2]);
        PretrainExample { kind: PretrainKind::MultiHopQa, tokens: f.tokens }
    }

    fn fact(&mut self) -> PretrainExample {
        let (s, r, o) = self.train_triples[self.rng.gen_range(0..self.train_triples.len())];
        let stmt = self.render(r, s, o);
        let mut tokens = Vec::with_capacity(stmt.len() + 1);
        tokens.push(crate::data::BOS);
        tokens.extend_from_slice(&stmt);
        PretrainExample { kind: PretrainKind::Fact, tokens }
    }

    fn unconditioned(&mut self) -> PretrainExample {
        let (s, r, o) = self.train_triples[self.rng.gen_range(0..self.train_triples.len())];
        let query = if self.rng.gen::<bool>() {
            self.world.query_canonical(r, s)
        } else {
            self.world.query_alias(r, s)
        };
        let f: Formatted = format_example(&[], &query, &[o]);
        PretrainExample { kind: PretrainKind::UnconditionedQa, tokens: f.tokens }
    }
}
