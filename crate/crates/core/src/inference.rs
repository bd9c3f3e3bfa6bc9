//! Multi-pass translation: repeated rewriting from the empty draft, the
//! score-drop stopping rule, and draft selection policies.

use std::fmt;
use std::str::FromStr;

use crate::bleu::{corpus_bleu_owned, sentence_bleu, BleuConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Graph;

/// Output of one rewriting pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Pass {
    pub tokens: Vec<String>,
    /// Evaluator score of `tokens`.
    pub q: f64,
    pub truncated: bool,
}

/// Anything that can rewrite a draft and score the result. Implementations
/// must be deterministic.
pub trait Rewriter {
    fn pass(&self, x: &[String], z_prev: &[String]) -> Result<Pass>;
}

/// Decoding length limit used for a source of `n` tokens.
pub fn max_decode_len(n: usize) -> usize {
    2 * n + 2
}

/// A trained [`Model`] used as a rewriter; `beam <= 1` decodes greedily.
#[derive(Debug, Clone, Copy)]
pub struct ModelRewriter<'a> {
    pub model: &'a Model,
    pub beam: usize,
}

impl<'a> ModelRewriter<'a> {
    pub fn new(model: &'a Model, beam: usize) -> Self {
        Self { model, beam }
    }
}

impl Rewriter for ModelRewriter<'_> {
    fn pass(&self, x: &[String], z_prev: &[String]) -> Result<Pass> {
        let mut g = Graph::new(self.model.params());
        let enc = self.model.encode(&mut g, x, z_prev)?;
        let max_len = max_decode_len(x.len());
        let out = if self.beam <= 1 {
            self.model.greedy(&mut g, &enc, max_len)
        } else {
            self.model.beam(&mut g, &enc, self.beam, max_len)
        };
        let scored = self.model.encode(&mut g, x, &out.tokens)?;
        let q = self.model.score(&mut g, &scored);
        Ok(Pass {
            q: g.scalar(q),
            tokens: out.tokens,
            truncated: out.truncated,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StoppingPolicy {
    /// Stop after pass `k` when `q_k + delta < q_{k-1}` and return the
    /// previous draft; otherwise return the draft of pass `max_passes`.
    Threshold { delta: f64, max_passes: usize },
    /// Run all passes and return the draft with the highest score.
    ArgmaxEvaluator { max_passes: usize },
    /// Run all passes and return the draft with the highest sentence BLEU
    /// against the reference.
    OracleBleu { max_passes: usize },
    /// Return the draft of pass `k`.
    FixedK { k: usize },
}

impl StoppingPolicy {
    pub fn max_passes(&self) -> usize {
        match *self {
            StoppingPolicy::Threshold { max_passes, .. }
            | StoppingPolicy::ArgmaxEvaluator { max_passes }
            | StoppingPolicy::OracleBleu { max_passes } => max_passes,
            StoppingPolicy::FixedK { k } => k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_passes() == 0 {
            return Err(Error::Config(
                "the number of passes must be at least 1".into(),
            ));
        }
        if let StoppingPolicy::Threshold { delta, .. } = self {
            if delta.is_nan() || *delta < 0.0 {
                return Err(Error::Config(format!(
                    "delta must be non-negative, got {delta}"
                )));
            }
        }
        Ok(())
    }

    /// Parses `threshold`, `argmax`, `oracle` or `fixed:<k>`; `delta` and
    /// `max_passes` fill in the remaining fields.
    pub fn parse(name: &str, delta: f64, max_passes: usize) -> Result<Self> {
        let policy = match name {
            "threshold" => StoppingPolicy::Threshold { delta, max_passes },
            "argmax" => StoppingPolicy::ArgmaxEvaluator { max_passes },
            "oracle" => StoppingPolicy::OracleBleu { max_passes },
            other => match other.strip_prefix("fixed:").map(usize::from_str) {
                Some(Ok(k)) => StoppingPolicy::FixedK { k },
                _ => {
                    return Err(Error::Config(format!(
                        "unknown policy {other:?} (expected threshold, argmax, oracle or fixed:<k>)"
                    )))
                }
            },
        };
        policy.validate()?;
        Ok(policy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Threshold,
    MaxPasses,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Threshold => "threshold",
            StopReason::MaxPasses => "max-passes",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewriteTrace {
    pub passes: Vec<Pass>,
    pub stop_reason: StopReason,
    /// 1-based index of the returned pass.
    pub chosen: usize,
}

impl RewriteTrace {
    pub fn chosen_pass(&self) -> &Pass {
        &self.passes[self.chosen - 1]
    }

    pub fn scores(&self) -> Vec<f64> {
        self.passes.iter().map(|p| p.q).collect()
    }

    /// Number of passes whose draft equals the previous one.
    pub fn fixed_point_passes(&self) -> usize {
        self.passes
            .windows(2)
            .filter(|w| w[0].tokens == w[1].tokens)
            .count()
    }

    /// `tokens \t stop_reason \t chosen_k \t q1 q2 ...`
    pub fn output_line(&self) -> String {
        let qs: Vec<String> = self.passes.iter().map(|p| format!("{:.6}", p.q)).collect();
        format!(
            "{}\t{}\t{}\t{}",
            self.chosen_pass().tokens.join(" "),
            self.stop_reason,
            self.chosen,
            qs.join(" ")
        )
    }
}

/// First index (1-based) of the maximum.
fn first_argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if i == 0 || v > best.1 {
            best = (i, v);
        }
    }
    best.0 + 1
}

/// Applies a policy to already computed passes. Threshold mode looks only
/// at the passes up to its stopping point.
pub fn select(
    passes: &[Pass],
    policy: &StoppingPolicy,
    reference: Option<&[String]>,
) -> Result<(usize, StopReason)> {
    if passes.len() < policy.max_passes() {
        return Err(Error::Contract(format!(
            "{} passes for a policy needing {}",
            passes.len(),
            policy.max_passes()
        )));
    }
    match *policy {
        StoppingPolicy::Threshold { delta, max_passes } => {
            for k in 2..=max_passes {
                if passes[k - 1].q + delta < passes[k - 2].q {
                    return Ok((k - 1, StopReason::Threshold));
                }
            }
            Ok((max_passes, StopReason::MaxPasses))
        }
        StoppingPolicy::ArgmaxEvaluator { max_passes } => Ok((
            first_argmax(passes[..max_passes].iter().map(|p| p.q)),
            StopReason::MaxPasses,
        )),
        StoppingPolicy::OracleBleu { max_passes } => {
            let reference = reference.ok_or(Error::MissingReference)?;
            let cfg = BleuConfig::default();
            let scores = passes[..max_passes]
                .iter()
                .map(|p| sentence_bleu(&p.tokens, reference, &cfg).map(|b| b.value))
                .collect::<Result<Vec<_>>>()?;
            Ok((first_argmax(scores.into_iter()), StopReason::MaxPasses))
        }
        StoppingPolicy::FixedK { k } => Ok((k, StopReason::MaxPasses)),
    }
}

/// Runs up to `k` passes from the empty draft. `stop` is consulted after
/// every pass. Once a pass reproduces its input, later passes are copies.
pub fn run_passes<R: Rewriter + ?Sized>(
    rewriter: &R,
    x: &[String],
    k: usize,
    mut stop: impl FnMut(&[Pass]) -> bool,
) -> Result<Vec<Pass>> {
    let mut passes: Vec<Pass> = Vec::with_capacity(k);
    let mut draft: Vec<String> = Vec::new();
    while passes.len() < k {
        let next = match passes.last() {
            Some(last) if passes.len() >= 2 && passes[passes.len() - 2].tokens == last.tokens => {
                last.clone()
            }
            _ => rewriter.pass(x, &draft)?,
        };
        draft = next.tokens.clone();
        passes.push(next);
        if stop(&passes) {
            break;
        }
    }
    Ok(passes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    pub tokens: Vec<String>,
    pub trace: RewriteTrace,
}

pub fn translate<R: Rewriter + ?Sized>(
    rewriter: &R,
    x: &[String],
    policy: &StoppingPolicy,
    reference: Option<&[String]>,
) -> Result<Translation> {
    policy.validate()?;
    if matches!(policy, StoppingPolicy::OracleBleu { .. }) && reference.is_none() {
        return Err(Error::MissingReference);
    }
    if x.is_empty() {
        return Err(Error::Contract("source sentence is empty".into()));
    }
    let k = policy.max_passes();
    let dropped =
        |p: &[Pass], delta: f64| p.len() >= 2 && p[p.len() - 1].q + delta < p[p.len() - 2].q;
    let passes = run_passes(rewriter, x, k, |p| match *policy {
        StoppingPolicy::Threshold { delta, .. } => dropped(p, delta),
        _ => false,
    })?;
    let (chosen, stop_reason) = match *policy {
        // a drop on the last allowed pass still returns its predecessor
        StoppingPolicy::Threshold { delta, .. } if dropped(&passes, delta) => {
            (passes.len() - 1, StopReason::Threshold)
        }
        StoppingPolicy::Threshold { .. } => (k, StopReason::MaxPasses),
        _ => select(&passes, policy, reference)?,
    };
    let trace = RewriteTrace {
        passes,
        stop_reason,
        chosen,
    };
    Ok(Translation {
        tokens: trace.chosen_pass().tokens.clone(),
        trace,
    })
}

/// Corpus BLEU of every fixed pass and of each selection policy, all
/// computed from one `K`-pass trace per sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyReport {
    /// Entry `k - 1` is the corpus BLEU of always taking pass `k`.
    pub fixed_k: Vec<f64>,
    pub argmax: f64,
    pub threshold: f64,
    pub oracle: f64,
    /// Mean chosen pass under the threshold policy.
    pub threshold_mean_k: f64,
    pub traces: Vec<Vec<Pass>>,
    pub chosen_argmax: Vec<usize>,
    pub chosen_threshold: Vec<usize>,
    pub chosen_oracle: Vec<usize>,
}

pub fn evaluate_policies<R: Rewriter + ?Sized>(
    rewriter: &R,
    pairs: &[(Vec<String>, Vec<String>)],
    k: usize,
    delta: f64,
) -> Result<PolicyReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let traces = pairs
        .iter()
        .map(|(x, _)| run_passes(rewriter, x, k, |_| false))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<Vec<String>> = pairs.iter().map(|(_, y)| y.clone()).collect();
    let cfg = BleuConfig::unsmoothed();
    let bleu_of = |chosen: &[usize]| {
        let cands: Vec<Vec<String>> = traces
            .iter()
            .zip(chosen)
            .map(|(t, &c)| t[c - 1].tokens.clone())
            .collect();
        corpus_bleu_owned(&cands, &refs, &cfg).map(|b| b.value)
    };
    let choose = |policy: StoppingPolicy| -> Result<Vec<usize>> {
        traces
            .iter()
            .zip(&refs)
            .map(|(t, y)| select(t, &policy, Some(y)).map(|(c, _)| c))
            .collect()
    };
    let fixed_k = (1..=k)
        .map(|j| bleu_of(&vec![j; traces.len()]))
        .collect::<Result<Vec<_>>>()?;
    let chosen_argmax = choose(StoppingPolicy::ArgmaxEvaluator { max_passes: k })?;
    let chosen_threshold = choose(StoppingPolicy::Threshold {
        delta,
        max_passes: k,
    })?;
    let chosen_oracle = choose(StoppingPolicy::OracleBleu { max_passes: k })?;
    Ok(PolicyReport {
        fixed_k,
        argmax: bleu_of(&chosen_argmax)?,
        threshold: bleu_of(&chosen_threshold)?,
        oracle: bleu_of(&chosen_oracle)?,
        threshold_mean_k: chosen_threshold.iter().sum::<usize>() as f64
            / chosen_threshold.len() as f64,
        traces,
        chosen_argmax,
        chosen_threshold,
        chosen_oracle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    /// Emits scripted drafts and scores by pass number (draft length).
    struct Scripted {
        scores: Vec<f64>,
        calls: Cell<usize>,
    }

    impl Scripted {
        fn new(scores: &[f64]) -> Self {
            Self {
                scores: scores.to_vec(),
                calls: Cell::new(0),
            }
        }
    }

    impl Rewriter for Scripted {
        fn pass(&self, _x: &[String], z: &[String]) -> Result<Pass> {
            self.calls.set(self.calls.get() + 1);
            let k = z.len();
            Ok(Pass {
                tokens: vec![format!("w{k}"); k + 1],
                q: self.scores[k],
                truncated: false,
            })
        }
    }

    fn src() -> Vec<String> {
        vec!["s".to_string()]
    }

    #[test]
    fn first_pass_never_stops_on_threshold() {
        let r = Scripted::new(&[-1e9, 5.0, 5.0]);
        let t = translate(
            &r,
            &src(),
            &StoppingPolicy::Threshold {
                delta: 0.01,
                max_passes: 1,
            },
            None,
        )
        .unwrap();
        assert_eq!(t.trace.chosen, 1);
        assert_eq!(t.trace.stop_reason, StopReason::MaxPasses);
    }

    #[test]
    fn score_drop_returns_previous_draft() {
        let r = Scripted::new(&[0.60, 0.50, 0.9, 0.9]);
        let policy = StoppingPolicy::Threshold {
            delta: 0.01,
            max_passes: 4,
        };
        let t = translate(&r, &src(), &policy, None).unwrap();
        assert_eq!(t.trace.passes.len(), 2);
        assert_eq!(t.trace.chosen, 1);
        assert_eq!(t.trace.stop_reason, StopReason::Threshold);
        assert_eq!(t.tokens, vec!["w0"]);
        assert_eq!(r.calls.get(), 2);
    }

    #[test]
    fn drop_on_the_last_pass_returns_its_predecessor() {
        let r = Scripted::new(&[0.2, 0.4, 0.1]);
        let t = translate(
            &r,
            &src(),
            &StoppingPolicy::Threshold {
                delta: 0.01,
                max_passes: 3,
            },
            None,
        )
        .unwrap();
        assert_eq!(
            (t.trace.chosen, t.trace.stop_reason),
            (2, StopReason::Threshold)
        );
        assert_eq!(t.trace.passes.len(), 3);
    }

    #[test]
    fn small_drop_within_delta_continues_to_k() {
        let r = Scripted::new(&[0.60, 0.595, 0.59]);
        let t = translate(
            &r,
            &src(),
            &StoppingPolicy::Threshold {
                delta: 0.01,
                max_passes: 3,
            },
            None,
        )
        .unwrap();
        assert_eq!(t.trace.passes.len(), 3);
        assert_eq!(
            (t.trace.chosen, t.trace.stop_reason),
            (3, StopReason::MaxPasses)
        );
    }

    #[test]
    fn argmax_takes_the_first_best_score() {
        let r = Scripted::new(&[0.1, 0.7, 0.3, 0.7]);
        let t = translate(
            &r,
            &src(),
            &StoppingPolicy::ArgmaxEvaluator { max_passes: 4 },
            None,
        )
        .unwrap();
        assert_eq!(t.trace.chosen, 2);
        assert_eq!(t.tokens, vec!["w1", "w1"]);
    }

    #[test]
    fn oracle_needs_a_reference() {
        let r = Scripted::new(&[0.1, 0.2]);
        let policy = StoppingPolicy::OracleBleu { max_passes: 2 };
        assert!(matches!(
            translate(&r, &src(), &policy, None),
            Err(Error::MissingReference)
        ));
        let reference = vec!["w1".to_string(), "w1".to_string()];
        let t = translate(&r, &src(), &policy, Some(&reference)).unwrap();
        assert_eq!(t.trace.chosen, 2);
    }

    #[test]
    fn fixed_k_returns_that_pass() {
        let r = Scripted::new(&[0.9, 0.1, 0.5]);
        let t = translate(&r, &src(), &StoppingPolicy::FixedK { k: 3 }, None).unwrap();
        assert_eq!(t.tokens.len(), 3);
    }

    #[test]
    fn policy_names_parse() {
        assert_eq!(
            StoppingPolicy::parse("fixed:2", 0.0, 4).unwrap(),
            StoppingPolicy::FixedK { k: 2 }
        );
        assert_eq!(
            StoppingPolicy::parse("threshold", 0.01, 6).unwrap(),
            StoppingPolicy::Threshold {
                delta: 0.01,
                max_passes: 6
            }
        );
        assert!(StoppingPolicy::parse("fixed:0", 0.0, 4).is_err());
        assert!(StoppingPolicy::parse("best", 0.0, 4).is_err());
        assert!(StoppingPolicy::parse("threshold", -0.5, 4).is_err());
    }

    struct Constant;

    impl Rewriter for Constant {
        fn pass(&self, _x: &[String], _z: &[String]) -> Result<Pass> {
            Ok(Pass {
                tokens: vec!["a".into()],
                q: 0.0,
                truncated: false,
            })
        }
    }

    #[test]
    fn fixed_points_are_logged_and_do_not_stop() {
        let t = translate(
            &Constant,
            &src(),
            &StoppingPolicy::Threshold {
                delta: 0.01,
                max_passes: 4,
            },
            None,
        )
        .unwrap();
        assert_eq!(t.trace.passes.len(), 4);
        assert_eq!(t.trace.fixed_point_passes(), 3);
    }

    #[test]
    fn output_line_format() {
        let r = Scripted::new(&[0.5, 0.25]);
        let t = translate(
            &r,
            &src(),
            &StoppingPolicy::ArgmaxEvaluator { max_passes: 2 },
            None,
        )
        .unwrap();
        assert_eq!(
            t.trace.output_line(),
            "w0\tmax-passes\t1\t0.500000 0.250000"
        );
    }

    #[test]
    fn selection_from_full_trace_agrees_with_lazy_threshold() {
        let r = Scripted::new(&[0.2, 0.4, 0.1, 0.5, 0.6]);
        let policy = StoppingPolicy::Threshold {
            delta: 0.05,
            max_passes: 5,
        };
        let lazy = translate(&r, &src(), &policy, None).unwrap();
        let full = run_passes(&r, &src(), 5, |_| false).unwrap();
        assert_eq!(
            select(&full, &policy, None).unwrap(),
            (lazy.trace.chosen, lazy.trace.stop_reason)
        );
    }
}
