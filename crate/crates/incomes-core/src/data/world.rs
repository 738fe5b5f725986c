//! A deterministic synthetic fact world.
//!
//! The vocabulary is fixed at 512 ids: three specials, 48 filler tokens,
//! 420 entities, 20 relations with two surface tokens each (a canonical
//! form and an alias), and the reserved compression token as the final id.
//! Facts are (subject, relation) -> object triples; each relation renders
//! edit statements through at least two token templates.

use std::collections::BTreeMap;

use crate::rng::{self, Rng};
use rand::seq::SliceRandom;
use rand::Rng as _;

pub const N_FILLERS: usize = 48;
pub const N_ENTITIES: usize = 420;
pub const N_RELATIONS: usize = 20;

pub const FILLER_BASE: u32 = 3;
pub const ENTITY_BASE: u32 = FILLER_BASE + N_FILLERS as u32;
pub const RELATION_BASE: u32 = ENTITY_BASE + N_ENTITIES as u32;
/// Total vocabulary: specials, fillers, entities, relation tokens, and one
/// reserved compression token at the top id.
pub const VOCAB_SIZE: usize = RELATION_BASE as usize + 2 * N_RELATIONS + 1;

/// Filler reserved to mark two-step queries. Never used inside statements.
pub const MULTI_HOP_MARK: u32 = FILLER_BASE;

/// Which half of the fact world a pair belongs to. Evaluation pairs are
/// never queried during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// One statement template: fixed filler runs around the three slots,
/// rendering `pre S mid1 R mid2 O suf`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pre: Vec<u32>,
    mid1: Vec<u32>,
    mid2: Vec<u32>,
    suf: Vec<u32>,
}

impl Template {
    pub fn render(&self, subject: u32, relation_token: u32, object: u32) -> Vec<u32> {
        let mut t = Vec::with_capacity(self.len());
        t.extend_from_slice(&self.pre);
        t.push(subject);
        t.extend_from_slice(&self.mid1);
        t.push(relation_token);
        t.extend_from_slice(&self.mid2);
        t.push(object);
        t.extend_from_slice(&self.suf);
        t
    }

    pub fn len(&self) -> usize {
        self.pre.len() + self.mid1.len() + self.mid2.len() + self.suf.len() + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Relation {
    main: u32,
    alias: u32,
    templates: Vec<Template>,
}

impl Relation {
    pub fn main(&self) -> u32 {
        self.main
    }

    pub fn alias(&self) -> u32 {
        self.alias
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }
}

/// The generated world: relations with templates plus the base triple map.
/// Fully determined by its seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct World {
    seed: u64,
    relations: Vec<Relation>,
    triples: BTreeMap<(u32, u16), u32>,
}

impl World {
    pub fn generate(seed: u64) -> World {
        let mut relations = Vec::with_capacity(N_RELATIONS);
        for r in 0..N_RELATIONS {
            let mut rng = rng::stream(seed, &format!("world.templates.{r}"));
            let n_templates = 2 + (rng.gen_range(0..2usize));
            let mut templates = Vec::with_capacity(n_templates);
            for _ in 0..n_templates {
                templates.push(Template {
                    pre: filler_run(&mut rng, 2, 3),
                    mid1: filler_run(&mut rng, 1, 3),
                    mid2: filler_run(&mut rng, 1, 2),
                    suf: filler_run(&mut rng, 2, 3),
                });
            }
            relations.push(Relation {
                main: RELATION_BASE + 2 * r as u32,
                alias: RELATION_BASE + 2 * r as u32 + 1,
                templates,
            });
        }

        let mut triples = BTreeMap::new();
        let mut rng = rng::stream(seed, "world.triples");
        let mut rel_indices: Vec<u16> = (0..N_RELATIONS as u16).collect();
        for e in 0..N_ENTITIES {
            let subject = ENTITY_BASE + e as u32;
            let k = rng.gen_range(5..=9usize);
            rel_indices.shuffle(&mut rng);
            for &r in rel_indices.iter().take(k) {
                let object = loop {
                    let o = ENTITY_BASE + rng.gen_range(0..N_ENTITIES) as u32;
                    if o != subject {
                        break o;
                    }
                };
                triples.insert((subject, r), object);
            }
        }

        World { seed, relations, triples }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn triples(&self) -> &BTreeMap<(u32, u16), u32> {
        &self.triples
    }

    pub fn entity(&self, i: usize) -> u32 {
        debug_assert!(i < N_ENTITIES);
        ENTITY_BASE + i as u32
    }

    pub fn base_object(&self, subject: u32, relation: u16) -> Option<u32> {
        self.triples.get(&(subject, relation)).copied()
    }

    /// Renders one edit statement for (subject, relation, object) with the
    /// given template of that relation. Statements always use the
    /// canonical relation token; the alias appears only in queries.
    pub fn render_edit(&self, relation: u16, template: usize, subject: u32, object: u32) -> Vec<u32> {
        let rel = &self.relations[relation as usize];
        rel.templates[template].render(subject, rel.main, object)
    }

    /// Canonical query body: `[subject, relation]`.
    pub fn query_canonical(&self, relation: u16, subject: u32) -> Vec<u32> {
        vec![subject, self.relations[relation as usize].main]
    }

    /// Alias query body: `[alias, subject]` — different token and order,
    /// so answering it requires more than surface copying.
    pub fn query_alias(&self, relation: u16, subject: u32) -> Vec<u32> {
        vec![self.relations[relation as usize].alias, subject]
    }

    /// Two-step query body: `[mark, subject, r1, r2]` asks for the object
    /// reached by following r1 then r2.
    pub fn query_hop(&self, subject: u32, r1: u16, r2: u16) -> Vec<u32> {
        vec![
            MULTI_HOP_MARK,
            subject,
            self.relations[r1 as usize].main,
            self.relations[r2 as usize].main,
        ]
    }

    /// Deterministic train/eval assignment of a (subject, relation) pair.
    /// Roughly 30% of pairs land in the evaluation split.
    pub fn pair_split(&self, subject: u32, relation: u16) -> Split {
        let h = rng::sub_seed(self.seed, &format!("split.{subject}.{relation}"));
        if h % 100 < 30 {
            Split::Eval
        } else {
            Split::Train
        }
    }
}

/// A run of `lo..=hi` filler tokens, excluding the multi-hop mark.
fn filler_run(rng: &mut Rng, lo: usize, hi: usize) -> Vec<u32> {
    let n = rng.gen_range(lo..=hi);
    (0..n)
        .map(|_| FILLER_BASE + 1 + rng.gen_range(0..N_FILLERS as u32 - 1))
        .collect()
}
