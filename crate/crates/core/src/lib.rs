//! Seven-class code clone grading.
//!
//! The pipeline curates clone-pair corpora, extracts lexical and AST
//! structural features, fits a heuristic prior over the lexical block, and
//! fuses those with frozen per-fragment embeddings in a small trainable head
//! (prior-conditioned feature-wise modulation followed by cross-attention
//! over structural tokens). Low-confidence predictions can be escalated to
//! an external chat-completion model.

pub mod arbiter;
pub mod corpus;
pub mod fusion;
pub mod jsonl;
pub mod lexical;
pub mod metrics;
pub mod prior;
pub mod semantic;
pub mod syntax;

/// Number of clone classes: 0 non-clone, 1 T1, 2 T2, 3 VST3, 4 ST3, 5 MT3, 6 WT3/T4.
pub const NUM_CLASSES: usize = 7;

/// Human-readable names for the seven labels.
pub const LABEL_NAMES: [&str; NUM_CLASSES] = [
    "Non-clone",
    "Type-1",
    "Type-2",
    "Very Strong Type-3",
    "Strong Type-3",
    "Moderate Type-3",
    "Weak Type-3 / Type-4",
];
