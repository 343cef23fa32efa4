// SPDX-License-Identifier: MIT OR Apache-2.0

//! ICL prompt construction and label-shuffling corruption.
//!
//! Template: each demonstration renders as `"Q: {x}\nA: {y}\n\n"` and the
//! query as `"Q: {x}\nA:"`; the answer is predicted at the final prompt token.
//! Corruption permutes demonstration labels (never the identity permutation),
//! leaving sources and query untouched.

use crate::error::{FvError, Result};
use crate::math::rng::DetRng;
use crate::tasks::pairs::{Split, WordPairSet};
use crate::tasks::vocab::{Vocab, ANSWER_MARK, QUERY_MARK, SEP};

/// One in-context prompt: demonstrations, query, gold answer, rendered ids.
#[derive(Clone, Debug, PartialEq)]
pub struct IclPrompt {
    pub demos: Vec<(String, String)>,
    pub query: String,
    pub gold: String,
    pub gold_token: u32,
    pub tokens: Vec<u32>,
}

impl IclPrompt {
    /// Position whose next-token distribution contains the answer.
    pub fn answer_position(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn n_demos(&self) -> usize {
        self.demos.len()
    }

    pub fn render(&self, vocab: &Vocab) -> Result<String> {
        vocab.render(&self.tokens)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptKind {
    Clean,
    Corrupted,
}

/// A batch of prompts for one task, clean or corrupted.
#[derive(Clone, Debug)]
pub struct PromptSet {
    pub task: String,
    pub kind: PromptKind,
    pub seed: u64,
    pub prompts: Vec<IclPrompt>,
}

impl PromptSet {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// Assemble a prompt from demonstrations and a `(query, gold)` pair. The gold
/// answer token is the first (and, word-level, only) token of the gold target.
pub fn build_prompt(
    vocab: &Vocab,
    demos: &[(String, String)],
    query: (&str, &str),
) -> Result<IclPrompt> {
    if demos.is_empty() {
        return Err(FvError::invalid("prompt needs at least one demonstration".into()));
    }
    let (x_q, y_q) = query;
    if demos.iter().any(|(x, _)| x == x_q) {
        return Err(FvError::invalid(format!(
            "query {x_q:?} appears among demonstration sources"
        )));
    }
    let mut tokens = Vec::with_capacity(demos.len() * 5 + 3);
    for (x, y) in demos {
        tokens.push(QUERY_MARK);
        tokens.push(vocab.word_id(x)?);
        tokens.push(ANSWER_MARK);
        tokens.push(vocab.word_id(y)?);
        tokens.push(SEP);
    }
    tokens.push(QUERY_MARK);
    tokens.push(vocab.word_id(x_q)?);
    tokens.push(ANSWER_MARK);
    let gold_token = vocab.word_id(y_q)?;
    Ok(IclPrompt {
        demos: demos.to_vec(),
        query: x_q.to_string(),
        gold: y_q.to_string(),
        gold_token,
        tokens,
    })
}

/// Zero-shot query prompt `"Q: {x}\nA:"`.
pub fn zero_shot_tokens(vocab: &Vocab, word: &str) -> Result<Vec<u32>> {
    Ok(vec![QUERY_MARK, vocab.word_id(word)?, ANSWER_MARK])
}

/// Permute demonstration labels with a uniformly random non-identity
/// permutation; sources and query are unchanged.
pub fn corrupt_prompt(vocab: &Vocab, p: &IclPrompt, rng: &mut DetRng) -> Result<IclPrompt> {
    let n = p.demos.len();
    if n < 2 {
        return Err(FvError::invalid(
            "corruption impossible: a single demonstration cannot be decoupled".into(),
        ));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        rng.shuffle(&mut perm);
        if perm.iter().enumerate().any(|(i, &j)| i != j) {
            break;
        }
    }
    let demos: Vec<(String, String)> = (0..n)
        .map(|i| (p.demos[i].0.clone(), p.demos[perm[i]].1.clone()))
        .collect();
    let mut corrupted = build_prompt_unchecked(vocab, &demos, (&p.query, &p.gold))?;
    corrupted.gold_token = p.gold_token;
    Ok(corrupted)
}

/// Same as `build_prompt` but skips the query-not-in-demos check; corruption
/// may legally move a label equal to the query's source word.
fn build_prompt_unchecked(
    vocab: &Vocab,
    demos: &[(String, String)],
    query: (&str, &str),
) -> Result<IclPrompt> {
    let mut tokens = Vec::with_capacity(demos.len() * 5 + 3);
    for (x, y) in demos {
        tokens.push(QUERY_MARK);
        tokens.push(vocab.word_id(x)?);
        tokens.push(ANSWER_MARK);
        tokens.push(vocab.word_id(y)?);
        tokens.push(SEP);
    }
    tokens.push(QUERY_MARK);
    tokens.push(vocab.word_id(query.0)?);
    tokens.push(ANSWER_MARK);
    Ok(IclPrompt {
        demos: demos.to_vec(),
        query: query.0.to_string(),
        gold: query.1.to_string(),
        gold_token: vocab.word_id(query.1)?,
        tokens,
    })
}

/// Build paired clean/corrupted prompt sets of equal size; corrupted prompt
/// `i` derives from clean prompt `i`.
pub fn make_prompt_sets(
    dataset: &WordPairSet,
    vocab: &Vocab,
    n_demos: usize,
    n_prompts: usize,
    seed: u64,
) -> Result<(PromptSet, PromptSet)> {
    if n_demos == 0 {
        return Err(FvError::invalid("n_demos must be >= 1".into()));
    }
    let pool = dataset.in_split(Split::Extract);
    if pool.len() < n_demos + 1 {
        return Err(FvError::invalid(format!(
            "insufficient data: {} extract pairs for {} demos + query",
            pool.len(),
            n_demos
        )));
    }
    let mut rng = DetRng::substream(seed, 0x70726f6d); // "prom"
    let mut clean = Vec::with_capacity(n_prompts);
    let mut corrupted = Vec::with_capacity(n_prompts);
    for _ in 0..n_prompts {
        let picks = rng.sample_distinct(pool.len(), n_demos + 1);
        let demos: Vec<(String, String)> =
            picks[..n_demos].iter().map(|&i| pool[i].clone()).collect();
        let (qx, qy) = pool[picks[n_demos]];
        let p = build_prompt(vocab, &demos, (qx, qy))?;
        corrupted.push(corrupt_prompt(vocab, &p, &mut rng)?);
        clean.push(p);
    }
    Ok((
        PromptSet {
            task: dataset.task.clone(),
            kind: PromptKind::Clean,
            seed,
            prompts: clean,
        },
        PromptSet {
            task: dataset.task.clone(),
            kind: PromptKind::Corrupted,
            seed,
            prompts: corrupted,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_vocab() -> Vocab {
        Vocab::from_words(["eggs", "oeufs", "good", "bon", "sugar", "sucre", "loan", "prêt"])
            .unwrap()
    }

    #[test]
    fn renders_the_reference_prompt_exactly() {
        let vocab = test_vocab();
        let demos = vec![
            ("eggs".to_string(), "oeufs".to_string()),
            ("good".to_string(), "bon".to_string()),
            ("sugar".to_string(), "sucre".to_string()),
        ];
        let p = build_prompt(&vocab, &demos, ("loan", "prêt")).unwrap();
        assert_eq!(
            p.render(&vocab).unwrap(),
            "Q: eggs\nA: oeufs\n\nQ: good\nA: bon\n\nQ: sugar\nA: sucre\n\nQ: loan\nA:"
        );
        assert_eq!(p.gold_token, vocab.word_id("prêt").unwrap());
        assert_eq!(p.answer_position(), p.tokens.len() - 1);
    }

    #[test]
    fn zero_demos_is_error() {
        let vocab = test_vocab();
        assert!(build_prompt(&vocab, &[], ("loan", "prêt")).is_err());
    }

    #[test]
    fn single_demo_template_unrolls() {
        let vocab = Vocab::from_words(["a", "b", "c", "d"]).unwrap();
        let p = build_prompt(&vocab, &[("a".into(), "b".into())], ("c", "d")).unwrap();
        assert_eq!(p.render(&vocab).unwrap(), "Q: a\nA: b\n\nQ: c\nA:");
    }

    #[test]
    fn query_in_demos_rejected() {
        let vocab = Vocab::from_words(["a", "b", "d"]).unwrap();
        assert!(build_prompt(&vocab, &[("a".into(), "b".into())], ("a", "d")).is_err());
    }

    #[test]
    fn two_demo_corruption_is_the_swap() {
        let vocab = Vocab::from_words(["a", "b", "x", "y", "q", "g"]).unwrap();
        let p = build_prompt(
            &vocab,
            &[("a".into(), "x".into()), ("b".into(), "y".into())],
            ("q", "g"),
        )
        .unwrap();
        let mut rng = DetRng::new(0);
        let c = corrupt_prompt(&vocab, &p, &mut rng).unwrap();
        assert_eq!(c.demos[0], ("a".into(), "y".into()));
        assert_eq!(c.demos[1], ("b".into(), "x".into()));
        assert_eq!(c.query, p.query);
        assert_eq!(c.gold_token, p.gold_token);
    }

    #[test]
    fn single_demo_corruption_is_error() {
        let vocab = Vocab::from_words(["a", "x", "q", "g"]).unwrap();
        let p = build_prompt(&vocab, &[("a".into(), "x".into())], ("q", "g")).unwrap();
        assert!(corrupt_prompt(&vocab, &p, &mut DetRng::new(0)).is_err());
    }

    #[test]
    fn corruption_preserves_sources_and_label_multiset() {
        let vocab = Vocab::from_words(["a", "b", "c", "d", "p", "q", "r", "s", "z", "w"]).unwrap();
        let demos: Vec<(String, String)> = [("a", "p"), ("b", "q"), ("c", "r"), ("d", "s")]
            .iter()
            .map(|(x, y)| (x.to_string(), y.to_string()))
            .collect();
        let p = build_prompt(&vocab, &demos, ("z", "w")).unwrap();
        let mut rng = DetRng::new(5);
        for _ in 0..50 {
            let c = corrupt_prompt(&vocab, &p, &mut rng).unwrap();
            let xs: Vec<&String> = c.demos.iter().map(|(x, _)| x).collect();
            assert_eq!(xs, demos.iter().map(|(x, _)| x).collect::<Vec<_>>());
            let mut ys: Vec<&String> = c.demos.iter().map(|(_, y)| y).collect();
            ys.sort();
            assert_eq!(ys, vec!["p", "q", "r", "s"]);
            assert_ne!(c.demos, p.demos, "identity permutation escaped");
        }
    }

    /// Uniformity over the 23 non-identity permutations of 4 labels, chi^2 at
    /// p = 0.01 with the threshold from an independent distribution oracle.
    #[test]
    fn corruption_permutations_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let vocab = Vocab::from_words(["a", "b", "c", "d", "p", "q", "r", "s", "z", "w"]).unwrap();
        let demos: Vec<(String, String)> = [("a", "p"), ("b", "q"), ("c", "r"), ("d", "s")]
            .iter()
            .map(|(x, y)| (x.to_string(), y.to_string()))
            .collect();
        let p = build_prompt(&vocab, &demos, ("z", "w")).unwrap();
        let mut rng = DetRng::new(99);
        let mut counts: std::collections::HashMap<Vec<String>, usize> = Default::default();
        let n = 10_000;
        for _ in 0..n {
            let c = corrupt_prompt(&vocab, &p, &mut rng).unwrap();
            let key: Vec<String> = c.demos.iter().map(|(_, y)| y.clone()).collect();
            *counts.entry(key).or_default() += 1;
        }
        assert_eq!(counts.len(), 23, "every non-identity permutation observed");
        let expected = n as f64 / 23.0;
        let stat: f64 = counts
            .values()
            .map(|&o| {
                let d = o as f64 - expected;
                d * d / expected
            })
            .sum();
        let threshold = ChiSquared::new(22.0).unwrap().inverse_cdf(0.99);
        assert!(stat <= threshold, "chi^2 {stat} > {threshold}");
    }

    fn small_dataset() -> (Vocab, WordPairSet) {
        let words: Vec<String> = (0..10)
            .flat_map(|i| [format!("s{i}"), format!("t{i}")])
            .collect();
        let vocab = Vocab::from_words(&words).unwrap();
        let pairs: Vec<(String, String)> =
            (0..10).map(|i| (format!("s{i}"), format!("t{i}"))).collect();
        let splits = vec![Split::Extract; 10];
        let set = WordPairSet::new("en-l1".into(), pairs, splits).unwrap();
        (vocab, set)
    }

    #[test]
    fn empty_prompt_sets() {
        let (vocab, set) = small_dataset();
        let (c, k) = make_prompt_sets(&set, &vocab, 3, 0, 42).unwrap();
        assert!(c.is_empty() && k.is_empty());
    }

    #[test]
    fn same_seed_same_sets() {
        let (vocab, set) = small_dataset();
        let (a, ac) = make_prompt_sets(&set, &vocab, 3, 8, 42).unwrap();
        let (b, bc) = make_prompt_sets(&set, &vocab, 3, 8, 42).unwrap();
        assert_eq!(a.prompts, b.prompts);
        assert_eq!(ac.prompts, bc.prompts);
    }

    #[test]
    fn corrupted_differs_only_in_label_order() {
        let (vocab, set) = small_dataset();
        let (clean, corr) = make_prompt_sets(&set, &vocab, 4, 16, 7).unwrap();
        assert_eq!(clean.len(), corr.len());
        for (p, c) in clean.prompts.iter().zip(corr.prompts.iter()) {
            assert_eq!(p.query, c.query);
            assert_eq!(p.gold, c.gold);
            assert_eq!(p.gold_token, c.gold_token);
            let px: Vec<_> = p.demos.iter().map(|(x, _)| x.clone()).collect();
            let cx: Vec<_> = c.demos.iter().map(|(x, _)| x.clone()).collect();
            assert_eq!(px, cx);
            let mut py: Vec<_> = p.demos.iter().map(|(_, y)| y.clone()).collect();
            let mut cy: Vec<_> = c.demos.iter().map(|(_, y)| y.clone()).collect();
            assert_ne!(py, cy);
            py.sort();
            cy.sort();
            assert_eq!(py, cy);
            // Token-level: differences confined to demo label slots.
            assert_eq!(p.tokens.len(), c.tokens.len());
            for (i, (tp, tc)) in p.tokens.iter().zip(c.tokens.iter()).enumerate() {
                if tp != tc {
                    assert_eq!(i % 5, 3, "mismatch outside a label slot at {i}");
                }
            }
        }
    }

    #[test]
    fn insufficient_data_is_error() {
        let (vocab, set) = small_dataset();
        assert!(make_prompt_sets(&set, &vocab, 10, 1, 0).is_err());
    }
}
