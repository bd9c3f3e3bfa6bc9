//! Synthetic transduction corpora.
//!
//! Every task draws a clean token sequence with no two equal neighbours,
//! derives the reference from it, and builds the source by duplicating
//! clean tokens with probability `noise`. Collapsing adjacent repeats in
//! the source therefore recovers the clean sequence, so each task has an
//! exact oracle ([`TaskSpec::solve`]).

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Vocabulary, RESERVED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    NoisyReversal,
    SubstitutionCipher,
    SortTokens,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noisy-reversal" => Ok(Self::NoisyReversal),
            "substitution-cipher" => Ok(Self::SubstitutionCipher),
            "sort-tokens" => Ok(Self::SortTokens),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected noisy-reversal, substitution-cipher or sort-tokens)"
            ))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::NoisyReversal => "noisy-reversal",
            Self::SubstitutionCipher => "substitution-cipher",
            Self::SortTokens => "sort-tokens",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a clean token is duplicated in the source.
    pub noise: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, vocab_size: usize, seed: u64) -> Self {
        Self {
            kind,
            vocab_size,
            min_len: 4,
            max_len: 10,
            noise: 0.15,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 {
            return Err(Error::Config(format!("vocab size {} < 8", self.vocab_size)));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::Config(format!(
                "noise rate {} outside [0, 0.5)",
                self.noise
            )));
        }
        if self.min_len < 3 || self.max_len > 20 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "length range {}..={} outside [3, 20]",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    pub fn token(i: usize) -> String {
        format!("t{i:03}")
    }

    fn cipher(&self) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_c1fe_u64);
        let mut perm: Vec<usize> = (0..self.vocab_size).collect();
        perm.shuffle(&mut rng);
        perm
    }

    fn transform(&self, clean: &[String]) -> Vec<String> {
        match self.kind {
            TaskKind::NoisyReversal => clean.iter().rev().cloned().collect(),
            TaskKind::SortTokens => {
                let mut v = clean.to_vec();
                v.sort();
                v
            }
            TaskKind::SubstitutionCipher => {
                let perm = self.cipher();
                clean
                    .iter()
                    .map(|t| {
                        let i: usize = t[1..].parse().expect("task token");
                        Self::token(perm[i])
                    })
                    .collect()
            }
        }
    }

    /// The exact source-to-reference mapping of this task.
    pub fn solve<S: AsRef<str>>(&self, source: &[S]) -> Vec<String> {
        let mut clean: Vec<String> = Vec::with_capacity(source.len());
        for t in source {
            if clean.last().map(String::as_str) != Some(t.as_ref()) {
                clean.push(t.as_ref().to_string());
            }
        }
        self.transform(&clean)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub src: Vec<String>,
    #[serde(rename = "ref")]
    pub reference: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    /// 80/10/10 split keyed by a hash of the pair index.
    pub fn of_index(index: usize) -> Self {
        match splitmix64(index as u64) % 10 {
            0..=7 => Split::Train,
            8 => Split::Dev,
            _ => Split::Test,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParallelCorpus {
    pub pairs: Vec<Pair>,
    pub split: Option<Split>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn split(&self, which: Split) -> ParallelCorpus {
        let pairs = self
            .pairs
            .iter()
            .enumerate()
            .filter(|(i, _)| Split::of_index(*i) == which)
            .map(|(_, p)| p.clone())
            .collect();
        ParallelCorpus {
            pairs,
            split: Some(which),
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&serde_json::to_string(p)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let pair: Pair = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            if pair.src.is_empty() || pair.reference.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "empty source or reference".into(),
                });
            }
            pairs.push(pair);
        }
        if pairs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self { pairs, split: None })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(self.to_jsonl()?.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_jsonl(&fs::read_to_string(path)?)
    }
}

/// Draws `n` pairs for `spec`; identical specs give identical corpora.
pub fn generate(spec: &TaskSpec, n: usize) -> Result<ParallelCorpus> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Contract("cannot generate an empty corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let mut clean: Vec<usize> = Vec::with_capacity(len);
        while clean.len() < len {
            let t = rng.gen_range(0..spec.vocab_size);
            if clean.last() != Some(&t) {
                clean.push(t);
            }
        }
        let clean: Vec<String> = clean.into_iter().map(TaskSpec::token).collect();
        let mut src = Vec::with_capacity(len * 2);
        for t in &clean {
            src.push(t.clone());
            if spec.noise > 0.0 && rng.gen_bool(spec.noise) {
                src.push(t.clone());
            }
        }
        let reference = spec.transform(&clean);
        pairs.push(Pair { src, reference });
    }
    Ok(ParallelCorpus { pairs, split: None })
}

/// Keeps the most frequent tokens (ties broken lexicographically) up to
/// `max_size` entries including the reserved symbols.
pub fn build_vocab(corpus: &ParallelCorpus, max_size: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for p in &corpus.pairs {
        for t in p.src.iter().chain(&p.reference) {
            *freq.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    for r in RESERVED {
        freq.remove(r);
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let keep = max_size.saturating_sub(RESERVED.len());
    Ok(Vocabulary::from_tokens(
        ranked.into_iter().take(keep).map(|(t, _)| t),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn sort_task_sorts() {
        let spec = TaskSpec::new(TaskKind::SortTokens, 8, 0);
        assert_eq!(spec.solve(&toks("c a b")), toks("a b c"));
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = TaskSpec::new(TaskKind::NoisyReversal, 16, 9);
        assert_eq!(generate(&spec, 50).unwrap(), generate(&spec, 50).unwrap());
        let other = TaskSpec { seed: 10, ..spec };
        assert_ne!(generate(&spec, 50).unwrap(), generate(&other, 50).unwrap());
    }

    #[test]
    fn zero_noise_reversal_is_exact_reverse() {
        let spec = TaskSpec {
            noise: 0.0,
            ..TaskSpec::new(TaskKind::NoisyReversal, 16, 3)
        };
        for p in generate(&spec, 100).unwrap().pairs {
            let rev: Vec<_> = p.src.iter().rev().cloned().collect();
            assert_eq!(p.reference, rev);
        }
    }

    #[test]
    fn every_task_is_solvable_and_noise_is_source_only() {
        for kind in [
            TaskKind::NoisyReversal,
            TaskKind::SubstitutionCipher,
            TaskKind::SortTokens,
        ] {
            let spec = TaskSpec {
                noise: 0.4,
                ..TaskSpec::new(kind, 12, 21)
            };
            let clean_spec = TaskSpec {
                noise: 0.0,
                ..spec.clone()
            };
            let noisy = generate(&spec, 200).unwrap();
            let clean = generate(&clean_spec, 200).unwrap();
            let mut lengthened = 0;
            for p in &noisy.pairs {
                assert_eq!(spec.solve(&p.src), p.reference);
                assert!(p.src.len() >= p.reference.len());
                lengthened += usize::from(p.src.len() > p.reference.len());
            }
            assert!(lengthened > 50);
            for p in &clean.pairs {
                assert_eq!(p.src.len(), p.reference.len());
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let base = TaskSpec::new(TaskKind::NoisyReversal, 16, 0);
        assert!(TaskSpec {
            vocab_size: 7,
            ..base.clone()
        }
        .validate()
        .is_err());
        assert!(TaskSpec {
            noise: 0.5,
            ..base.clone()
        }
        .validate()
        .is_err());
        assert!(TaskSpec {
            max_len: 21,
            ..base.clone()
        }
        .validate()
        .is_err());
        assert!(TaskSpec { min_len: 2, ..base }.validate().is_err());
    }

    #[test]
    fn split_is_roughly_80_10_10() {
        let mut counts = [0usize; 3];
        for i in 0..10_000 {
            counts[Split::of_index(i) as usize] += 1;
        }
        assert!((7700..8300).contains(&counts[0]), "{counts:?}");
        assert!((800..1200).contains(&counts[1]), "{counts:?}");
        assert!((800..1200).contains(&counts[2]), "{counts:?}");
    }

    #[test]
    fn jsonl_round_trip() {
        let spec = TaskSpec::new(TaskKind::SubstitutionCipher, 32, 4);
        let c = generate(&spec, 1000).unwrap();
        assert_eq!(
            ParallelCorpus::parse_jsonl(&c.to_jsonl().unwrap()).unwrap(),
            c
        );
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(
            ParallelCorpus::parse_jsonl(""),
            Err(Error::EmptyCorpus)
        ));
        assert!(matches!(
            ParallelCorpus::parse_jsonl("\n  \n"),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn fixture_parses() {
        let text = "{\"src\": [\"t001\", \"t002\"], \"ref\": [\"t002\", \"t001\"]}\n{\"src\": [\"t003\"], \"ref\": [\"t003\"]}\n";
        let c = ParallelCorpus::parse_jsonl(text).unwrap();
        assert_eq!(
            c.pairs,
            vec![
                Pair {
                    src: toks("t001 t002"),
                    reference: toks("t002 t001")
                },
                Pair {
                    src: toks("t003"),
                    reference: toks("t003")
                },
            ]
        );
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"src\": [\"a\"], \"ref\": [\"a\"]}\n{\"src\": [\"a\"]\n";
        match ParallelCorpus::parse_jsonl(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn vocab_keeps_frequent_tokens_and_breaks_ties_lexicographically() {
        let corpus = ParallelCorpus {
            pairs: vec![
                Pair {
                    src: toks("b b a c"),
                    reference: toks("c a b b"),
                },
                Pair {
                    src: toks("d e"),
                    reference: toks("e d"),
                },
            ],
            split: None,
        };
        let full = build_vocab(&corpus, 100).unwrap();
        assert_eq!(&full.tokens()[5..], &toks("b a c d e")[..]);
        for p in &corpus.pairs {
            assert!(full
                .encode_all(&p.src)
                .iter()
                .all(|&i| i != Vocabulary::UNK_ID));
        }
        let small = build_vocab(&corpus, RESERVED.len() + 2).unwrap();
        assert_eq!(&small.tokens()[5..], &toks("b a")[..]);
        assert_eq!(small.encode("e"), Vocabulary::UNK_ID);
        assert_eq!(build_vocab(&corpus, 100).unwrap(), full);
    }
}
