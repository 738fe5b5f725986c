//! Case generation over the synthetic world.
//!
//! A case bundles the edit statements it injects with one query about
//! them (or, for locality, about an untouched fact). Generation is
//! deterministic in the seed. With `unique_pairs` every (subject,
//! relation) pair — including second chain hops — is claimed by at most
//! one case, so cases can share an attention pool without contradicting
//! each other.

use std::collections::BTreeSet;

use crate::data::world::{Split, World, N_ENTITIES, N_RELATIONS};
use crate::data::{Case, CaseKind, EditSpec};
use crate::rng::{self, Rng};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng as _;

/// Sampling rates per case kind; must sum to 1.
#[derive(Clone, Copy, Debug)]
pub struct CaseMix {
    pub recall: f64,
    pub paraphrase: f64,
    pub multi_hop: f64,
    pub locality: f64,
}

impl CaseMix {
    /// Balanced evaluation mix.
    pub fn eval_default() -> CaseMix {
        CaseMix { recall: 0.4, paraphrase: 0.2, multi_hop: 0.2, locality: 0.2 }
    }

    /// Single-kind mixes for targeted sets.
    pub fn only(kind: CaseKind) -> CaseMix {
        let mut m = CaseMix { recall: 0.0, paraphrase: 0.0, multi_hop: 0.0, locality: 0.0 };
        match kind {
            CaseKind::Recall => m.recall = 1.0,
            CaseKind::Paraphrase => m.paraphrase = 1.0,
            CaseKind::MultiHop => m.multi_hop = 1.0,
            CaseKind::Locality => m.locality = 1.0,
        }
        m
    }

    fn validate(&self) -> Result<()> {
        let parts = [self.recall, self.paraphrase, self.multi_hop, self.locality];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::param("mix", "rates must lie in [0, 1]"));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::param("mix", "rates must sum to 1"));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut Rng) -> CaseKind {
        let u: f64 = rng.gen();
        if u < self.recall {
            CaseKind::Recall
        } else if u < self.recall + self.paraphrase {
            CaseKind::Paraphrase
        } else if u < self.recall + self.paraphrase + self.multi_hop {
            CaseKind::MultiHop
        } else {
            CaseKind::Locality
        }
    }
}

struct PairSource {
    pool: Vec<(u32, u16, u32)>,
    cursor: usize,
    unique: bool,
    used: BTreeSet<(u32, u16)>,
}

impl PairSource {
    fn new(world: &World, split: Split, rng: &mut Rng, unique: bool) -> PairSource {
        let mut pool: Vec<(u32, u16, u32)> = world
            .triples()
            .iter()
            .filter(|(&(s, r), _)| world.pair_split(s, r) == split)
            .map(|(&(s, r), &o)| (s, r, o))
            .collect();
        pool.shuffle(rng);
        PairSource { pool, cursor: 0, unique, used: BTreeSet::new() }
    }

    /// Next base triple whose pair is unclaimed (when unique).
    fn next(&mut self, rng: &mut Rng) -> Result<(u32, u16, u32)> {
        if self.unique {
            while self.cursor < self.pool.len() {
                let t = self.pool[self.cursor];
                self.cursor += 1;
                if self.used.insert((t.0, t.1)) {
                    return Ok(t);
                }
            }
            Err(Error::Generation(
                "exhausted unique (subject, relation) pairs in this split".into(),
            ))
        } else {
            let t = self.pool[rng.gen_range(0..self.pool.len())];
            Ok(t)
        }
    }

    /// Claims an arbitrary (subject, relation) pair for a chain hop.
    fn claim(&mut self, subject: u32, relation: u16) -> bool {
        !self.unique || self.used.insert((subject, relation))
    }
}

/// Generates `count` cases. Edit ids are unique across the returned set
/// and start at 1; case ids are 0-based positions.
pub fn gen_cases(
    world: &World,
    split: Split,
    mix: CaseMix,
    count: usize,
    seed: u64,
    unique_pairs: bool,
) -> Result<Vec<Case>> {
    mix.validate()?;
    let mut rng = rng::stream(seed, "cases");
    let mut source = PairSource::new(world, split, &mut rng, unique_pairs);
    if source.pool.is_empty() {
        return Err(Error::Generation("split holds no triples".into()));
    }
    let mut cases = Vec::with_capacity(count);
    let mut next_edit_id: u64 = 1;

    for case_id in 0..count as u64 {
        let kind = mix.draw(&mut rng);
        let case = match kind {
            CaseKind::Recall | CaseKind::Paraphrase => {
                let (s, r, o_base) = source.next(&mut rng)?;
                let o_new = other_entity(world, &mut rng, &[s, o_base]);
                let tpl = rng.gen_range(0..world.relations()[r as usize].templates().len());
                let edit = EditSpec {
                    id: next_edit_id,
                    tokens: world.render_edit(r, tpl, s, o_new),
                };
                next_edit_id += 1;
                let query = if kind == CaseKind::Recall {
                    world.query_canonical(r, s)
                } else {
                    world.query_alias(r, s)
                };
                Case {
                    case_id,
                    kind,
                    related: vec![edit.id],
                    edits: vec![edit],
                    query,
                    answer: vec![o_new],
                    base_answer: Some(o_base),
                }
            }
            CaseKind::MultiHop => {
                let (s0, r1, _) = source.next(&mut rng)?;
                // Pick a bridge entity and second relation whose pair is
                // still unclaimed, so no other case can contradict hop 2.
                let (o1, r2) = loop {
                    let o1 = other_entity(world, &mut rng, &[s0]);
                    let r2 = rng.gen_range(0..N_RELATIONS as u16);
                    if source.claim(o1, r2) {
                        break (o1, r2);
                    }
                };
                let o2 = other_entity(world, &mut rng, &[o1]);
                let tpl1 = rng.gen_range(0..world.relations()[r1 as usize].templates().len());
                let tpl2 = rng.gen_range(0..world.relations()[r2 as usize].templates().len());
                let e1 = EditSpec { id: next_edit_id, tokens: world.render_edit(r1, tpl1, s0, o1) };
                let e2 =
                    EditSpec { id: next_edit_id + 1, tokens: world.render_edit(r2, tpl2, o1, o2) };
                next_edit_id += 2;
                Case {
                    case_id,
                    kind,
                    related: vec![e1.id, e2.id],
                    edits: vec![e1, e2],
                    query: world.query_hop(s0, r1, r2),
                    answer: vec![o2],
                    base_answer: None,
                }
            }
            CaseKind::Locality => {
                let (s, r, o_base) = source.next(&mut rng)?;
                Case {
                    case_id,
                    kind,
                    edits: Vec::new(),
                    related: Vec::new(),
                    query: world.query_canonical(r, s),
                    answer: vec![o_base],
                    base_answer: Some(o_base),
                }
            }
        };
        cases.push(case);
    }
    Ok(cases)
}

/// One training step's material: `cases` to score and the shared `pool`
/// holding every case edit plus distractors up to `pool_target` entries.
/// All pool entries claim distinct (subject, relation) pairs, so the pool
/// never contradicts itself.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub cases: Vec<Case>,
    pub pool: Vec<EditSpec>,
}

pub fn gen_step(
    world: &World,
    split: Split,
    mix: CaseMix,
    k: usize,
    pool_target: usize,
    seed: u64,
) -> Result<StepBatch> {
    let cases = gen_cases(world, split, mix, k, seed, true)?;
    let mut pool: Vec<EditSpec> = cases.iter().flat_map(|c| c.edits.clone()).collect();
    let mut next_id = pool.iter().map(|e| e.id).max().unwrap_or(0) + 1;

    // Rebuild the claim set the cases consumed, then keep drawing
    // distractor edits against it.
    let mut rng = rng::stream(seed, "cases");
    let mut source = PairSource::new(world, split, &mut rng, true);
    let mut rng = rng::stream(seed, "distractors");
    for c in &cases {
        for e in &c.edits {
            let (s, r) = super::cases::internal_pair(world, &e.tokens);
            source.used.insert((s, r));
        }
        if c.kind == CaseKind::Locality {
            source.used.insert((c.query[0], rel_index(c.query[1])));
        }
    }
    while pool.len() < pool_target {
        let (s, r, o_base) = source.next(&mut rng)?;
        let o_new = other_entity(world, &mut rng, &[s, o_base]);
        let tpl = rng.gen_range(0..world.relations()[r as usize].templates().len());
        pool.push(EditSpec { id: next_id, tokens: world.render_edit(r, tpl, s, o_new) });
        next_id += 1;
    }
    Ok(StepBatch { cases, pool })
}

fn rel_index(token: u32) -> u16 {
    ((token - crate::data::world::RELATION_BASE) / 2) as u16
}

/// Recovers the (subject, relation) pair a statement is about: slots
/// appear in subject, relation, object order and templates contain only
/// fillers.
pub(crate) fn internal_pair(_world: &World, tokens: &[u32]) -> (u32, u16) {
    use crate::data::world::{ENTITY_BASE, RELATION_BASE};
    let s = *tokens
        .iter()
        .find(|&&t| (ENTITY_BASE..RELATION_BASE).contains(&t))
        .expect("statement without a subject");
    let r = *tokens
        .iter()
        .find(|&&t| t >= RELATION_BASE)
        .expect("statement without a relation");
    (s, rel_index(r))
}

fn other_entity(world: &World, rng: &mut Rng, avoid: &[u32]) -> u32 {
    loop {
        let e = world.entity(rng.gen_range(0..N_ENTITIES));
        if !avoid.contains(&e) {
            return e;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::world::{ENTITY_BASE, MULTI_HOP_MARK, RELATION_BASE};

    fn is_entity(t: u32) -> bool {
        (ENTITY_BASE..RELATION_BASE).contains(&t)
    }

    fn is_relation(t: u32) -> bool {
        (RELATION_BASE..RELATION_BASE + 2 * N_RELATIONS as u32).contains(&t)
    }

    /// Recovers (subject, relation index) from a rendered statement:
    /// slots appear in S, R, O order and templates contain only fillers.
    fn edited_pair(tokens: &[u32]) -> (u32, u16) {
        let s = *tokens.iter().find(|&&t| is_entity(t)).unwrap();
        let r = *tokens.iter().find(|&&t| is_relation(t)).unwrap();
        (s, ((r - RELATION_BASE) / 2) as u16)
    }

    #[test]
    fn cases_are_deterministic_and_well_formed() {
        let world = World::generate(3);
        let mix = CaseMix::eval_default();
        let a = gen_cases(&world, Split::Eval, mix, 300, 17, true).unwrap();
        let b = gen_cases(&world, Split::Eval, mix, 300, 17, true).unwrap();
        assert_eq!(a, b);
        for c in &a {
            match c.kind {
                CaseKind::Recall | CaseKind::Paraphrase => {
                    assert_eq!(c.edits.len(), 1);
                    assert_eq!(c.related, vec![c.edits[0].id]);
                    assert_eq!(c.query.len(), 2);
                    assert_ne!(vec![c.base_answer.unwrap()], c.answer);
                }
                CaseKind::MultiHop => {
                    assert_eq!(c.edits.len(), 2);
                    assert_eq!(c.related.len(), 2);
                    assert_eq!(c.query.len(), 4);
                    assert_eq!(c.query[0], MULTI_HOP_MARK);
                }
                CaseKind::Locality => {
                    assert!(c.edits.is_empty());
                    assert!(c.related.is_empty());
                    assert_eq!(c.answer, vec![c.base_answer.unwrap()]);
                }
            }
            assert_eq!(c.answer.len(), 1);
            assert!(is_entity(c.answer[0]));
        }
    }

    #[test]
    fn unique_generation_never_edits_or_queries_a_pair_twice() {
        let world = World::generate(4);
        let cases =
            gen_cases(&world, Split::Eval, CaseMix::eval_default(), 400, 5, true).unwrap();
        let mut pairs = BTreeSet::new();
        for c in &cases {
            for e in &c.edits {
                assert!(pairs.insert(edited_pair(&e.tokens)), "pair edited twice");
            }
            if c.kind == CaseKind::Locality {
                let (s, r) = (c.query[0], ((c.query[1] - RELATION_BASE) / 2) as u16);
                assert!(pairs.insert((s, r)), "locality pair collides with an edit");
            }
        }
    }

    #[test]
    fn edit_ids_are_unique_and_multi_hop_chains_connect() {
        let world = World::generate(6);
        let cases =
            gen_cases(&world, Split::Train, CaseMix::only(CaseKind::MultiHop), 100, 8, false)
                .unwrap();
        let mut ids = BTreeSet::new();
        for c in &cases {
            for e in &c.edits {
                assert!(ids.insert(e.id));
            }
            let (_, _) = edited_pair(&c.edits[0].tokens);
            let (s2, _) = edited_pair(&c.edits[1].tokens);
            // Hop 1's object is hop 2's subject.
            let o1 = *c.edits[0].tokens.iter().filter(|&&t| is_entity(t)).nth(1).unwrap();
            assert_eq!(o1, s2, "chain does not connect");
            // And the answer is hop 2's object.
            let o2 = *c.edits[1].tokens.iter().filter(|&&t| is_entity(t)).nth(1).unwrap();
            assert_eq!(c.answer, vec![o2]);
        }
    }

    #[test]
    fn split_isolation_holds_for_single_pair_queries() {
        let world = World::generate(8);
        let eval =
            gen_cases(&world, Split::Eval, CaseMix::only(CaseKind::Recall), 200, 1, true).unwrap();
        for c in &eval {
            let (s, r) = edited_pair(&c.edits[0].tokens);
            assert_eq!(world.pair_split(s, r), Split::Eval);
        }
        let train =
            gen_cases(&world, Split::Train, CaseMix::only(CaseKind::Recall), 200, 1, false)
                .unwrap();
        for c in &train {
            let (s, r) = edited_pair(&c.edits[0].tokens);
            assert_eq!(world.pair_split(s, r), Split::Train);
        }
    }

    #[test]
    fn step_batches_share_one_claim_set() {
        let world = World::generate(15);
        let mix = CaseMix { recall: 0.45, paraphrase: 0.15, multi_hop: 0.15, locality: 0.25 };
        let sb = gen_step(&world, Split::Train, mix, 8, 32, 77).unwrap();
        assert_eq!(sb.cases.len(), 8);
        assert_eq!(sb.pool.len(), 32);
        let mut ids = BTreeSet::new();
        let mut pairs = BTreeSet::new();
        for e in &sb.pool {
            assert!(ids.insert(e.id), "duplicate pool id");
            assert!(pairs.insert(edited_pair(&e.tokens)), "pool contradicts itself");
        }
        for c in &sb.cases {
            for e in &c.edits {
                assert!(ids.contains(&e.id), "case edit missing from pool");
            }
            if c.kind == CaseKind::Locality {
                let pair = (c.query[0], ((c.query[1] - RELATION_BASE) / 2) as u16);
                assert!(!pairs.contains(&pair), "an edit overrides a locality query");
            }
        }
        assert_eq!(gen_step(&world, Split::Train, mix, 8, 32, 77).unwrap().pool, sb.pool);
    }

    #[test]
    fn bad_mixes_are_rejected() {
        let world = World::generate(1);
        let m = CaseMix { recall: 0.5, paraphrase: 0.5, multi_hop: 0.5, locality: -0.5 };
        assert!(gen_cases(&world, Split::Eval, m, 1, 1, true).is_err());
        let m2 = CaseMix { recall: 0.5, paraphrase: 0.0, multi_hop: 0.0, locality: 0.0 };
        assert!(gen_cases(&world, Split::Eval, m2, 1, 1, true).is_err());
    }
}
