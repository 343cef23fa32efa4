// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic lexicon generation, word-pair ingestion, ICL prompt
//! construction, and label-shuffling corruption.

pub mod lexicon;
pub mod pairs;
pub mod prompt;
pub mod vocab;

pub use lexicon::{gen_lexicon, Lexicon, LexiconConfig};
pub use pairs::{load_word_pairs, PairFormat, Split, WordPairSet};
pub use prompt::{
    build_prompt, corrupt_prompt, make_prompt_sets, zero_shot_tokens, IclPrompt, PromptKind,
    PromptSet,
};
pub use vocab::Vocab;
