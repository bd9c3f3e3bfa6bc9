//! BLEU with clipped n-gram precision and a brevity penalty.
//!
//! Sentence-level scores use add-one smoothing on the n > 1 precisions by
//! default; corpus scores aggregate raw counts before taking precisions.
//! Scores are in `[0, 1]`.

use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BleuConfig {
    pub max_n: usize,
    /// Add one to numerator and denominator of every n > 1 precision.
    pub smoothing: bool,
    pub case_sensitive: bool,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self {
            max_n: 4,
            smoothing: true,
            case_sensitive: true,
        }
    }
}

impl BleuConfig {
    pub fn unsmoothed() -> Self {
        Self {
            smoothing: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BleuScore {
    pub value: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

/// Matched and total n-gram counts for each order, plus lengths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NgramStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl NgramStats {
    fn empty(max_n: usize) -> Self {
        Self {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            candidate_len: 0,
            reference_len: 0,
        }
    }

    fn add(&mut self, other: &NgramStats) {
        for n in 0..self.matches.len() {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }
}

fn normalise<S: AsRef<str>>(tokens: &[S], cfg: &BleuConfig) -> Vec<String> {
    tokens
        .iter()
        .map(|t| {
            if cfg.case_sensitive {
                t.as_ref().to_string()
            } else {
                t.as_ref().to_lowercase()
            }
        })
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

pub fn ngram_stats<S: AsRef<str>, T: AsRef<str>>(
    candidate: &[S],
    reference: &[T],
    cfg: &BleuConfig,
) -> NgramStats {
    let cand = normalise(candidate, cfg);
    let refr = normalise(reference, cfg);
    let mut stats = NgramStats::empty(cfg.max_n);
    stats.candidate_len = cand.len();
    stats.reference_len = refr.len();
    for n in 1..=cfg.max_n {
        let c = ngram_counts(&cand, n);
        let r = ngram_counts(&refr, n);
        stats.matches[n - 1] = c
            .iter()
            .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
            .sum();
        stats.totals[n - 1] = cand.len().saturating_sub(n - 1);
    }
    stats
}

fn score_from_stats(stats: &NgramStats, cfg: &BleuConfig) -> BleuScore {
    let c = stats.candidate_len;
    let r = stats.reference_len;
    let brevity_penalty = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let precisions: Vec<f64> = (0..cfg.max_n)
        .map(|i| {
            let add = if cfg.smoothing && i > 0 { 1.0 } else { 0.0 };
            let num = stats.matches[i] as f64 + add;
            let den = stats.totals[i] as f64 + add;
            if den == 0.0 {
                0.0
            } else {
                num / den
            }
        })
        .collect();
    let value = if c == 0 || precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / cfg.max_n as f64;
        brevity_penalty * log_mean.exp()
    };
    BleuScore {
        value,
        precisions,
        brevity_penalty,
        candidate_len: c,
        reference_len: r,
    }
}

/// Sentence BLEU. An empty candidate scores 0; an empty reference is an
/// error.
pub fn sentence_bleu<S: AsRef<str>, T: AsRef<str>>(
    candidate: &[S],
    reference: &[T],
    cfg: &BleuConfig,
) -> Result<BleuScore> {
    if reference.is_empty() {
        return Err(Error::Contract("BLEU reference is empty".into()));
    }
    if cfg.max_n == 0 {
        return Err(Error::Contract("BLEU max_n must be at least 1".into()));
    }
    Ok(score_from_stats(
        &ngram_stats(candidate, reference, cfg),
        cfg,
    ))
}

/// Corpus BLEU over `(candidate, reference)` pairs, aggregating counts.
pub fn corpus_bleu<S: AsRef<str>, T: AsRef<str>>(
    pairs: &[(&[S], &[T])],
    cfg: &BleuConfig,
) -> Result<BleuScore> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.max_n == 0 {
        return Err(Error::Contract("BLEU max_n must be at least 1".into()));
    }
    let mut total = NgramStats::empty(cfg.max_n);
    for (cand, refr) in pairs {
        if refr.is_empty() {
            return Err(Error::Contract("BLEU reference is empty".into()));
        }
        total.add(&ngram_stats(cand, refr, cfg));
    }
    Ok(score_from_stats(&total, cfg))
}

/// Convenience wrapper over owned sentences.
pub fn corpus_bleu_owned(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
    cfg: &BleuConfig,
) -> Result<BleuScore> {
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    let pairs: Vec<(&[String], &[String])> = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| (c.as_slice(), r.as_slice()))
        .collect();
    corpus_bleu(&pairs, cfg)
}
