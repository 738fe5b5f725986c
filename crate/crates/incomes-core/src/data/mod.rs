//! Synthetic fact world, dataset generation, and the token formatting
//! contract shared by training and evaluation.
//!
//! Every sequence in the system is built by [`format_example`]: an optional
//! block of edit statements, a query, and an answer. Training teachers,
//! in-context baselines, and greedy evaluation all call the same function,
//! so their inputs agree byte for byte.

pub mod cases;
pub mod io;
pub mod pretrain;
pub mod world;

use serde::{Deserialize, Serialize};

/// Sequence-start token. Always at index 0.
pub const BOS: u32 = 0;
/// Separator between edit statements; doubled before the query.
pub const SEP: u32 = 1;
/// Marks the boundary between query and answer.
pub const ANS: u32 = 2;

/// One edit statement: a unique id and its rendered tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSpec {
    pub id: u64,
    pub tokens: Vec<u32>,
}

/// What a case measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseKind {
    /// Query an edited fact in its canonical form.
    Recall,
    /// Query an edited fact through the alias form.
    Paraphrase,
    /// Query a two-step chain where both hops are edited.
    MultiHop,
    /// Query an untouched fact; the model must ignore the pool.
    Locality,
}

/// One evaluation or training example.
///
/// `edits` are the statements this case injects, `related` the ids among
/// them that matter for its query (empty for locality). For locality the
/// stored `answer` is the true base object; evaluation replaces it with
/// whatever the unedited model actually says.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Case {
    pub case_id: u64,
    pub kind: CaseKind,
    pub edits: Vec<EditSpec>,
    pub related: Vec<u64>,
    pub query: Vec<u32>,
    pub answer: Vec<u32>,
    /// True base object for the queried pair, when one exists.
    pub base_answer: Option<u32>,
}

/// A formatted token sequence with its span structure.
///
/// Layout: `[BOS] e1 [SEP] e2 [SEP] .. em [SEP] [SEP] query [ANS] answer`.
/// With no edits the prefix collapses to `[BOS]` and the sequence is the
/// unconditioned form. `query_start` indexes the first query token;
/// `answer_start` indexes the first answer token (after [ANS]).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Formatted {
    pub tokens: Vec<u32>,
    pub query_start: usize,
    pub answer_start: usize,
}

impl Formatted {
    /// Token indices whose prediction is scored: query plus [ANS] plus
    /// answer when `on_query`, answer only otherwise. Index `j` is
    /// predicted at row `j - 1`, so 0 is never in the span.
    pub fn loss_span(&self, on_query: bool) -> Vec<usize> {
        let start = if on_query { self.query_start } else { self.answer_start };
        (start..self.tokens.len()).collect()
    }

    /// The prompt a decoder starts from: everything through [ANS].
    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..self.answer_start]
    }

    pub fn answer(&self) -> &[u32] {
        &self.tokens[self.answer_start..]
    }
}

/// Builds the shared sequence form. `edits` may be empty, giving the
/// unconditioned layout `[BOS] query [ANS] answer`.
pub fn format_example(edits: &[&[u32]], query: &[u32], answer: &[u32]) -> Formatted {
    let edit_len: usize = edits.iter().map(|e| e.len() + 1).sum();
    let mut tokens = Vec::with_capacity(1 + edit_len + 1 + query.len() + 1 + answer.len());
    tokens.push(BOS);
    for e in edits {
        tokens.extend_from_slice(e);
        tokens.push(SEP);
    }
    if !edits.is_empty() {
        tokens.push(SEP);
    }
    let query_start = tokens.len();
    tokens.extend_from_slice(query);
    tokens.push(ANS);
    let answer_start = tokens.len();
    tokens.extend_from_slice(answer);
    Formatted { tokens, query_start, answer_start }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conditioned_layout_is_exact() {
        let e1 = vec![10, 11, 12];
        let e2 = vec![20, 21];
        let f = format_example(&[&e1, &e2], &[30, 31], &[40]);
        assert_eq!(
            f.tokens,
            vec![BOS, 10, 11, 12, SEP, 20, 21, SEP, SEP, 30, 31, ANS, 40]
        );
        assert_eq!(f.query_start, 9);
        assert_eq!(f.answer_start, 12);
        assert_eq!(f.prompt(), &f.tokens[..12]);
        assert_eq!(f.answer(), &[40]);
        assert_eq!(f.loss_span(true), vec![9, 10, 11, 12]);
        assert_eq!(f.loss_span(false), vec![12]);
    }

    #[test]
    fn unconditioned_layout_has_no_separators() {
        let f = format_example(&[], &[30, 31], &[40, 41]);
        assert_eq!(f.tokens, vec![BOS, 30, 31, ANS, 40, 41]);
        assert_eq!(f.query_start, 1);
        assert_eq!(f.answer_start, 4);
    }

    #[test]
    fn empty_edit_list_equals_unconditioned_form() {
        let q = vec![5, 6];
        let a = vec![7];
        assert_eq!(format_example(&[], &q, &a), {
            let mut t = vec![BOS];
            t.extend_from_slice(&q);
            t.push(ANS);
            t.extend_from_slice(&a);
            Formatted { tokens: t, query_start: 1, answer_start: 4 }
        });
    }
}
