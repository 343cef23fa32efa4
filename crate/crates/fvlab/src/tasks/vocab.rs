// SPDX-License-Identifier: MIT OR Apache-2.0

//! Word-level closed vocabulary.
//!
//! Every word is exactly one token, rendered with a leading space; three
//! structural tokens (`"Q:"`, `"\nA:"`, `"\n\n"`) and an instruction wrapper
//! carry the prompt template. Rendering is plain concatenation of token
//! surfaces, and greedy longest-match tokenization inverts it exactly.

use std::collections::HashMap;

use crate::error::{FvError, Result};

pub const QUERY_MARK: u32 = 0; // "Q:"
pub const ANSWER_MARK: u32 = 1; // "\nA:"
pub const SEP: u32 = 2; // "\n\n"
pub const INSTRUCTION: u32 = 3; // "<inst>\n"
pub const FIRST_WORD: u32 = 4;

#[derive(Clone, Debug)]
pub struct Vocab {
    surfaces: Vec<String>,
    index: HashMap<String, u32>,
    max_surface_len: usize,
}

impl Vocab {
    /// Build from bare words (no leading space). Words must be nonempty,
    /// whitespace-free, and pairwise distinct.
    pub fn from_words<I, S>(words: I) -> Result<Vocab>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut surfaces: Vec<String> = vec![
            "Q:".into(),
            "\nA:".into(),
            "\n\n".into(),
            "<inst>\n".into(),
        ];
        for w in words {
            let w = w.as_ref();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(FvError::Token(format!("invalid word {w:?}")));
            }
            surfaces.push(format!(" {w}"));
        }
        let mut index = HashMap::with_capacity(surfaces.len());
        for (i, s) in surfaces.iter().enumerate() {
            if index.insert(s.clone(), i as u32).is_some() {
                return Err(FvError::Token(format!("duplicate surface {s:?}")));
            }
        }
        let max_surface_len = surfaces.iter().map(|s| s.len()).max().unwrap_or(0);
        Ok(Vocab {
            surfaces,
            index,
            max_surface_len,
        })
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn surface(&self, id: u32) -> Result<&str> {
        self.surfaces
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| FvError::Token(format!("token id {id} out of vocab")))
    }

    /// Token id of a bare word.
    pub fn word_id(&self, word: &str) -> Result<u32> {
        self.index
            .get(&format!(" {word}"))
            .copied()
            .ok_or_else(|| FvError::Token(format!("unknown word {word:?}")))
    }

    /// Bare word of a token id, if it is a word token.
    pub fn word_of(&self, id: u32) -> Option<&str> {
        if id < FIRST_WORD {
            return None;
        }
        self.surfaces.get(id as usize).map(|s| &s[1..])
    }

    /// Concatenate token surfaces.
    pub fn render(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            out.push_str(self.surface(id)?);
        }
        Ok(out)
    }

    /// Greedy longest-match tokenization; exact inverse of `render` for any
    /// token sequence over this vocabulary.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        let bytes = text.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            let top = (i + self.max_surface_len).min(bytes.len());
            let mut matched = None;
            for end in (i + 1..=top).rev() {
                if !text.is_char_boundary(end) {
                    continue;
                }
                if let Some(&id) = self.index.get(&text[i..end]) {
                    matched = Some((id, end));
                    break;
                }
            }
            match matched {
                Some((id, end)) => {
                    out.push(id);
                    i = end;
                }
                None => {
                    return Err(FvError::Token(format!(
                        "untokenizable text at byte {i}: {:?}",
                        &text[i..text.len().min(i + 16)]
                    )))
                }
            }
        }
        Ok(out)
    }
}
