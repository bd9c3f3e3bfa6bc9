//! Greedy and beam decoding over the extended vocabulary.

use super::{DecState, Encoding, Model};
use crate::tensor::Graph;
use crate::vocab::Vocabulary;

/// A decoded draft. `ids` are extended ids without the final EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    pub log_prob: f64,
    /// Hit `max_len` before producing EOS.
    pub truncated: bool,
}

impl Decoded {
    /// Number of scored decoding steps, counting EOS when produced.
    pub fn length(&self) -> usize {
        self.ids.len() + usize::from(!self.truncated)
    }

    /// Log probability divided by [`Decoded::length`].
    pub fn normalized_score(&self) -> f64 {
        self.log_prob / self.length() as f64
    }

    fn resolve(mut self, model: &Model, enc: &Encoding) -> Self {
        self.tokens = self
            .ids
            .iter()
            .map(|&i| enc.draft.resolve(&model.vocab, i))
            .collect();
        self
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(super) fn greedy(model: &Model, g: &mut Graph, enc: &Encoding, max_len: usize) -> Decoded {
    let max_len = max_len.max(1);
    let (ctx, mut state) = model.start(g, enc);
    let mut prev = Vocabulary::SOS_ID;
    let mut ids = Vec::new();
    let mut log_prob = 0.0;
    let truncated = loop {
        let (next, out) = model.step(g, &ctx, &state, prev);
        let dist = g.value(out.dist);
        let best = argmax(dist);
        log_prob += dist[best].ln();
        if best == Vocabulary::EOS_ID {
            break false;
        }
        ids.push(best);
        if ids.len() == max_len {
            break true;
        }
        state = next;
        prev = best;
    };
    Decoded {
        tokens: Vec::new(),
        ids,
        log_prob,
        truncated,
    }
    .resolve(model, enc)
}

struct Hypothesis {
    ids: Vec<usize>,
    log_prob: f64,
    state: DecState,
}

/// Beam search ranked by length-normalised log probability. The greedy
/// path is always among the final candidates.
pub(super) fn beam(
    model: &Model,
    g: &mut Graph,
    enc: &Encoding,
    beam: usize,
    max_len: usize,
) -> Decoded {
    let beam = beam.max(1);
    let max_len = max_len.max(1);
    let (ctx, state) = model.start(g, enc);
    let mut active = vec![Hypothesis {
        ids: Vec::new(),
        log_prob: 0.0,
        state,
    }];
    let mut completed: Vec<Decoded> = Vec::new();

    while !active.is_empty() && completed.len() < beam {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        let mut next_states = Vec::with_capacity(active.len());
        for (hi, hyp) in active.iter().enumerate() {
            let prev = hyp.ids.last().copied().unwrap_or(Vocabulary::SOS_ID);
            let (next, out) = model.step(g, &ctx, &hyp.state, prev);
            next_states.push(next);
            for (t, &p) in g.value(out.dist).iter().enumerate() {
                if p > 0.0 {
                    candidates.push((hyp.log_prob + p.ln(), hi, t));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(beam);

        let mut survivors = Vec::new();
        for (log_prob, hi, t) in candidates {
            let mut ids = active[hi].ids.clone();
            if t == Vocabulary::EOS_ID {
                completed.push(Decoded {
                    tokens: Vec::new(),
                    ids,
                    log_prob,
                    truncated: false,
                });
                continue;
            }
            ids.push(t);
            if ids.len() == max_len {
                completed.push(Decoded {
                    tokens: Vec::new(),
                    ids,
                    log_prob,
                    truncated: true,
                });
            } else {
                survivors.push(Hypothesis {
                    ids,
                    log_prob,
                    state: next_states[hi].clone(),
                });
            }
        }
        active = survivors;
    }

    let mut best = greedy(model, g, enc, max_len);
    for c in completed {
        if c.normalized_score() > best.normalized_score() {
            best = c.resolve(model, enc);
        }
    }
    best
}
