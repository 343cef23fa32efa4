// SPDX-License-Identifier: MIT OR Apache-2.0

//! Word-pair datasets and ingestion of external pair files.

use std::io::BufRead;
use std::path::Path;

use serde::Deserialize;

use crate::error::{FvError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Extract,
    Heldout,
}

/// Ordered `(source, target)` pairs for one direction, with split tags.
#[derive(Clone, Debug)]
pub struct WordPairSet {
    pub task: String,
    pairs: Vec<(String, String)>,
    splits: Vec<Split>,
}

impl WordPairSet {
    pub fn new(task: String, pairs: Vec<(String, String)>, splits: Vec<Split>) -> Result<Self> {
        if pairs.len() != splits.len() {
            return Err(FvError::invalid("pairs/splits length mismatch".into()));
        }
        // No duplicate source word within a split.
        let mut seen = std::collections::HashSet::new();
        for ((x, _), s) in pairs.iter().zip(splits.iter()) {
            if !seen.insert((x.clone(), *s)) {
                return Err(FvError::Data(format!(
                    "duplicate source word {x:?} within split {s:?}"
                )));
            }
        }
        Ok(WordPairSet {
            task,
            pairs,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn in_split(&self, split: Split) -> Vec<&(String, String)> {
        self.pairs
            .iter()
            .zip(self.splits.iter())
            .filter(|(_, s)| **s == split)
            .map(|(p, _)| p)
            .collect()
    }
}

/// Input formats for external word-pair files.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairFormat {
    /// `source<TAB>target`, one pair per line.
    Tsv,
    /// Line-delimited records with fields `src` and `tgt`.
    Jsonl,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRow {
    src: String,
    tgt: String,
}

/// Ingest a word-pair file, order-preserving. Duplicate source words and
/// malformed lines are rejected with their line numbers. All pairs are
/// tagged `Extract`.
pub fn load_word_pairs(path: impl AsRef<Path>, format: PairFormat) -> Result<WordPairSet> {
    let path = path.as_ref();
    let task = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("pairs")
        .to_string();
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut pairs = Vec::new();
    let mut seen = std::collections::HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (src, tgt) = match format {
            PairFormat::Tsv => {
                let mut it = line.split('\t');
                let src = it.next().unwrap_or("").trim().to_string();
                let tgt = it.next().unwrap_or("").trim().to_string();
                if src.is_empty() || tgt.is_empty() || it.next().is_some() {
                    return Err(FvError::Data(format!(
                        "line {lineno}: expected source<TAB>target"
                    )));
                }
                (src, tgt)
            }
            PairFormat::Jsonl => {
                let row: PairRow = serde_json::from_str(&line)
                    .map_err(|e| FvError::Data(format!("line {lineno}: {e}")))?;
                (row.src, row.tgt)
            }
        };
        if let Some(prev) = seen.insert(src.clone(), lineno) {
            return Err(FvError::Data(format!(
                "duplicate source word {src:?} at line {lineno} (first at line {prev})"
            )));
        }
        pairs.push((src, tgt));
    }
    if pairs.is_empty() {
        return Err(FvError::Data(format!("empty word-pair file {path:?}")));
    }
    let splits = vec![Split::Extract; pairs.len()];
    WordPairSet::new(task, pairs, splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn two_line_tsv() {
        let f = write_tmp("eggs\toeufs\ngood\tbon\n");
        let set = load_word_pairs(f.path(), PairFormat::Tsv).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.pairs()[0], ("eggs".into(), "oeufs".into()));
        assert_eq!(set.pairs()[1], ("good".into(), "bon".into()));
    }

    #[test]
    fn empty_file_is_error() {
        let f = write_tmp("");
        assert!(load_word_pairs(f.path(), PairFormat::Tsv).is_err());
    }

    #[test]
    fn duplicate_source_reports_line() {
        let f = write_tmp("eggs\toeufs\ngood\tbon\neggs\thuevos\n");
        let err = load_word_pairs(f.path(), PairFormat::Tsv).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn jsonl_format() {
        let f = write_tmp("{\"src\":\"eggs\",\"tgt\":\"oeufs\"}\n{\"src\":\"good\",\"tgt\":\"bon\"}\n");
        let set = load_word_pairs(f.path(), PairFormat::Jsonl).unwrap();
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn malformed_line_is_error() {
        let f = write_tmp("eggs oeufs\n");
        assert!(load_word_pairs(f.path(), PairFormat::Tsv).is_err());
    }
}
