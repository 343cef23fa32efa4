// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic multilingual lexicon.
//!
//! Concepts are shared across languages by construction: concept `c` has one
//! surface form per language, all distinct, each a single vocabulary token.
//! A block of number words backs the successor control task. Concepts with
//! the highest ids form the held-out pool, disjoint from the extraction pool
//! by construction.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FvError, Result};
use crate::math::rng::DetRng;
use crate::tasks::pairs::{Split, WordPairSet};
use crate::tasks::vocab::{Vocab, FIRST_WORD};

pub const DEFAULT_HELDOUT: usize = 120;
pub const DEFAULT_NUMBERS: usize = 32;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconConfig {
    pub n_concepts: usize,
    pub n_target_languages: usize,
    #[serde(default = "default_numbers")]
    pub n_numbers: usize,
    #[serde(default = "default_heldout")]
    pub heldout_concepts: usize,
}

fn default_numbers() -> usize {
    DEFAULT_NUMBERS
}

fn default_heldout() -> usize {
    DEFAULT_HELDOUT
}

#[derive(Clone, Debug)]
pub struct Lexicon {
    languages: Vec<String>,
    n_concepts: usize,
    n_numbers: usize,
    heldout: usize,
    vocab: Vocab,
}

#[derive(Serialize, Deserialize)]
struct LexiconRow {
    concept: usize,
    language: String,
    surface: String,
}

const CONSONANTS: &[u8] = b"bcdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn syllables(rng: &mut DetRng) -> String {
    let n = 2 + rng.below(2);
    let mut s = String::with_capacity(2 * n);
    for _ in 0..n {
        s.push(CONSONANTS[rng.below(CONSONANTS.len())] as char);
        s.push(VOWELS[rng.below(VOWELS.len())] as char);
    }
    s
}

impl Lexicon {
    /// Generate a lexicon: `n_concepts` concepts in English plus
    /// `n_target_languages` targets, deterministic under the rng.
    pub fn generate(cfg: &LexiconConfig, rng: &mut DetRng) -> Result<Lexicon> {
        if cfg.n_concepts < 50 {
            return Err(FvError::invalid(format!(
                "need at least 50 concepts, got {}",
                cfg.n_concepts
            )));
        }
        if cfg.n_target_languages < 1 {
            return Err(FvError::invalid("need at least 2 languages in total".into()));
        }
        if cfg.heldout_concepts >= cfg.n_concepts {
            return Err(FvError::invalid(format!(
                "heldout {} must be < n_concepts {}",
                cfg.heldout_concepts, cfg.n_concepts
            )));
        }
        if cfg.n_numbers < 4 {
            return Err(FvError::invalid("need at least 4 number words".into()));
        }
        let mut languages = vec!["en".to_string()];
        for i in 1..=cfg.n_target_languages {
            languages.push(format!("l{i}"));
        }

        let mut words: Vec<String> = (0..cfg.n_numbers).map(|n| n.to_string()).collect();
        for lang in &languages {
            let mut seen = std::collections::HashSet::new();
            let mut produced = 0usize;
            let mut attempts = 0usize;
            while produced < cfg.n_concepts {
                attempts += 1;
                if attempts > 1000 * cfg.n_concepts {
                    return Err(FvError::invalid(
                        "vocabulary capacity exceeded while generating surfaces".into(),
                    ));
                }
                let candidate = format!("{lang}_{}", syllables(rng));
                if seen.insert(candidate.clone()) {
                    words.push(candidate);
                    produced += 1;
                }
            }
        }
        let vocab = Vocab::from_words(&words)?;
        Ok(Lexicon {
            languages,
            n_concepts: cfg.n_concepts,
            n_numbers: cfg.n_numbers,
            heldout: cfg.heldout_concepts,
            vocab,
        })
    }

    pub fn config(&self) -> LexiconConfig {
        LexiconConfig {
            n_concepts: self.n_concepts,
            n_target_languages: self.languages.len() - 1,
            n_numbers: self.n_numbers,
            heldout_concepts: self.heldout,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn target_languages(&self) -> &[String] {
        &self.languages[1..]
    }

    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    pub fn n_numbers(&self) -> usize {
        self.n_numbers
    }

    fn lang_index(&self, lang: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| FvError::invalid(format!("unknown language {lang:?}")))
    }

    /// Token id of `concept` expressed in `lang`.
    pub fn word_token(&self, concept: usize, lang: &str) -> Result<u32> {
        if concept >= self.n_concepts {
            return Err(FvError::invalid(format!("concept {concept} out of range")));
        }
        let li = self.lang_index(lang)?;
        Ok(FIRST_WORD + (self.n_numbers + li * self.n_concepts + concept) as u32)
    }

    /// Bare surface form of `(concept, lang)`.
    pub fn surface(&self, concept: usize, lang: &str) -> Result<&str> {
        let id = self.word_token(concept, lang)?;
        Ok(self.vocab.word_of(id).expect("word token"))
    }

    pub fn number_token(&self, n: usize) -> Result<u32> {
        if n >= self.n_numbers {
            return Err(FvError::invalid(format!("number {n} out of range")));
        }
        Ok(FIRST_WORD + n as u32)
    }

    /// Classify a token id: `Some((language index, concept))` for word tokens.
    pub fn word_token_info(&self, id: u32) -> Option<(usize, usize)> {
        let base = FIRST_WORD as usize + self.n_numbers;
        let idx = (id as usize).checked_sub(base)?;
        if idx >= self.languages.len() * self.n_concepts {
            return None;
        }
        Some((idx / self.n_concepts, idx % self.n_concepts))
    }

    /// Concept ids reserved for evaluation (never used to build extraction
    /// prompts).
    pub fn heldout_concepts(&self) -> std::ops::Range<usize> {
        self.n_concepts - self.heldout..self.n_concepts
    }

    /// Concept ids available to extraction prompt sets.
    pub fn extract_concepts(&self) -> std::ops::Range<usize> {
        0..self.n_concepts - self.heldout
    }

    /// Word-pair dataset for one direction, tagged extract/heldout by the
    /// concept split.
    pub fn word_pairs(&self, src: &str, tgt: &str) -> Result<WordPairSet> {
        if src == tgt {
            return Err(FvError::invalid("source language equals target".into()));
        }
        self.lang_index(src)?;
        self.lang_index(tgt)?;
        let mut pairs = Vec::with_capacity(self.n_concepts);
        let mut splits = Vec::with_capacity(self.n_concepts);
        for c in 0..self.n_concepts {
            pairs.push((
                self.surface(c, src)?.to_string(),
                self.surface(c, tgt)?.to_string(),
            ));
            splits.push(if self.heldout_concepts().contains(&c) {
                Split::Heldout
            } else {
                Split::Extract
            });
        }
        WordPairSet::new(format!("{src}-{tgt}"), pairs, splits)
    }

    /// Export as line-delimited `(concept, language, surface)` records.
    pub fn export_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (li, lang) in self.languages.iter().enumerate() {
            let _ = li;
            for concept in 0..self.n_concepts {
                let row = LexiconRow {
                    concept,
                    language: lang.clone(),
                    surface: self.surface(concept, lang)?.to_string(),
                };
                serde_json::to_writer(&mut f, &row)?;
                f.write_all(b"\n")?;
            }
        }
        f.flush()?;
        Ok(())
    }

    /// Rebuild from an export. Number and held-out sizes are not part of the
    /// record format and must be supplied.
    pub fn import_jsonl(
        path: impl AsRef<Path>,
        n_numbers: usize,
        heldout: usize,
    ) -> Result<Lexicon> {
        let f = std::io::BufReader::new(std::fs::File::open(path.as_ref())?);
        let mut languages: Vec<String> = Vec::new();
        let mut rows: Vec<LexiconRow> = Vec::new();
        for (lineno, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: LexiconRow = serde_json::from_str(&line)
                .map_err(|e| FvError::Data(format!("line {}: {e}", lineno + 1)))?;
            if !languages.contains(&row.language) {
                languages.push(row.language.clone());
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(FvError::Data("empty lexicon file".into()));
        }
        let n_concepts = rows.iter().map(|r| r.concept + 1).max().unwrap_or(0);
        if rows.len() != languages.len() * n_concepts {
            return Err(FvError::Data(format!(
                "expected {} rows for {} languages x {} concepts, got {}",
                languages.len() * n_concepts,
                languages.len(),
                n_concepts,
                rows.len()
            )));
        }
        if heldout >= n_concepts {
            return Err(FvError::invalid("heldout >= n_concepts".into()));
        }
        // Surfaces keyed by (language order, concept) to mirror generation.
        let mut surfaces = vec![String::new(); languages.len() * n_concepts];
        for row in &rows {
            let li = languages.iter().position(|l| *l == row.language).unwrap();
            let slot = &mut surfaces[li * n_concepts + row.concept];
            if !slot.is_empty() {
                return Err(FvError::Data(format!(
                    "duplicate record for concept {} language {}",
                    row.concept, row.language
                )));
            }
            *slot = row.surface.clone();
        }
        if surfaces.iter().any(String::is_empty) {
            return Err(FvError::Data("missing (concept, language) record".into()));
        }
        let mut words: Vec<String> = (0..n_numbers).map(|n| n.to_string()).collect();
        words.extend(surfaces);
        let vocab = Vocab::from_words(&words)?;
        Ok(Lexicon {
            languages,
            n_concepts,
            n_numbers,
            heldout,
            vocab,
        })
    }
}

/// Convenience generator with default number/held-out sizes.
pub fn gen_lexicon(
    n_concepts: usize,
    n_target_languages: usize,
    rng: &mut DetRng,
) -> Result<Lexicon> {
    Lexicon::generate(
        &LexiconConfig {
            n_concepts,
            n_target_languages,
            n_numbers: DEFAULT_NUMBERS,
            heldout_concepts: DEFAULT_HELDOUT.min(n_concepts / 4),
        },
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_gives_four_distinct_tokens() {
        let mut rng = DetRng::new(1);
        let lex = Lexicon::generate(
            &LexiconConfig {
                n_concepts: 50,
                n_target_languages: 1,
                n_numbers: 4,
                heldout_concepts: 10,
            },
            &mut rng,
        )
        .unwrap();
        let mut set = std::collections::HashSet::new();
        for c in 0..2 {
            for lang in ["en", "l1"] {
                set.insert(lex.surface(c, lang).unwrap().to_string());
            }
        }
        assert_eq!(set.len(), 4);
    }

    #[test]
    fn same_seed_same_lexicon() {
        let a = gen_lexicon(60, 2, &mut DetRng::new(7)).unwrap();
        let b = gen_lexicon(60, 2, &mut DetRng::new(7)).unwrap();
        for c in 0..60 {
            for lang in ["en", "l1", "l2"] {
                assert_eq!(a.surface(c, lang).unwrap(), b.surface(c, lang).unwrap());
            }
        }
    }

    #[test]
    fn all_surfaces_unique_by_exhaustive_scan() {
        let mut rng = DetRng::new(3);
        let lex = Lexicon::generate(
            &LexiconConfig {
                n_concepts: 500,
                n_target_languages: 5,
                n_numbers: 32,
                heldout_concepts: 120,
            },
            &mut rng,
        )
        .unwrap();
        let mut seen = std::collections::HashSet::new();
        let mut count = 0;
        for lang in lex.languages().to_vec() {
            for c in 0..500 {
                assert!(seen.insert(lex.surface(c, &lang).unwrap().to_string()));
                count += 1;
            }
        }
        assert_eq!(count, 3000);
    }

    #[test]
    fn export_import_roundtrip() {
        let lex = gen_lexicon(60, 2, &mut DetRng::new(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lexicon.jsonl");
        lex.export_jsonl(&path).unwrap();
        let back = Lexicon::import_jsonl(&path, lex.n_numbers(), lex.heldout).unwrap();
        assert_eq!(back.vocab_size(), lex.vocab_size());
        for c in 0..60 {
            for lang in ["en", "l1", "l2"] {
                assert_eq!(
                    back.word_token(c, lang).unwrap(),
                    lex.word_token(c, lang).unwrap()
                );
            }
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let lex = gen_lexicon(100, 2, &mut DetRng::new(2)).unwrap();
        let e = lex.extract_concepts();
        let h = lex.heldout_concepts();
        assert!(e.end == h.start && h.end == 100);
    }
}
