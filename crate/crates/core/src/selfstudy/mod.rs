//! Synthetic corpora with ground-truth QA, and the teacher rollouts that make
//! up a distillation dataset.
//!
//! Corpora are byte-level text: one line per entity listing `attr=value`
//! pairs. Every fact is recorded alongside the text so evaluation items can be
//! checked against ground truth.

mod corpus;
mod diversity;
mod traces;

pub use corpus::{
    load_corpus, load_eval_items, make_corpus, save_corpus, save_eval_items, AttributeSpec, EvalItem,
    Fact, SyntheticCorpus, TaskSpec, NUM_OPTIONS,
};
pub use diversity::{diversity_sweep, ngram_diversity, write_diversity_csv, DiversityRow};
pub use traces::{
    generate_traces, load_traces, render_query, rollout, sample_token, save_traces, teacher_cache,
    SeedType, TraceConfig, TraceDataset, TraceRecord, END_TOKEN,
};

use crate::Token;

/// Byte tokens of an ASCII string.
pub fn tokens_of(s: &str) -> Vec<Token> {
    s.bytes().map(Token::from).collect()
}

/// Lossy text rendering of byte tokens, for logs and CSVs.
pub fn text_of(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|&t| match u8::try_from(t) {
            Ok(b) if b.is_ascii_graphic() || b == b' ' => b as char,
            Ok(b'\n') => '\n',
            _ => '?',
        })
        .collect()
}
