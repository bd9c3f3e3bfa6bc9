//! Pointer-generator output head: attention over the previous draft, the
//! copy gate, and the mixture of generating and copying.

use rand::Rng;

use crate::tensor::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::vocab::Vocabulary;

/// A previous draft prepared for copying. Out-of-vocabulary draft tokens
/// get extended ids `|V|, |V|+1, ...` so they can still be copied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedDraft {
    /// Embedding ids of the draft content (OOV mapped to UNK).
    pub ids: Vec<usize>,
    /// Extended id each content position copies to.
    pub copy_ids: Vec<usize>,
    /// Surface forms of the extended ids, in order.
    pub oov: Vec<String>,
    pub vocab_size: usize,
}

impl PreparedDraft {
    pub fn new<S: AsRef<str>>(vocab: &Vocabulary, draft: &[S]) -> Self {
        let mut oov: Vec<String> = Vec::new();
        let mut ids = Vec::with_capacity(draft.len());
        let mut copy_ids = Vec::with_capacity(draft.len());
        for t in draft {
            let t = t.as_ref();
            match vocab.id(t) {
                Some(id) => {
                    ids.push(id);
                    copy_ids.push(id);
                }
                None => {
                    ids.push(Vocabulary::UNK_ID);
                    let k = match oov.iter().position(|o| o == t) {
                        Some(k) => k,
                        None => {
                            oov.push(t.to_string());
                            oov.len() - 1
                        }
                    };
                    copy_ids.push(vocab.len() + k);
                }
            }
        }
        Self {
            ids,
            copy_ids,
            oov,
            vocab_size: vocab.len(),
        }
    }

    pub fn ext_size(&self) -> usize {
        self.vocab_size + self.oov.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Extended id of a gold token: its vocabulary id, else its copy id,
    /// else UNK.
    pub fn target_id(&self, vocab: &Vocabulary, token: &str) -> usize {
        if let Some(id) = vocab.id(token) {
            return id;
        }
        match self.oov.iter().position(|o| o == token) {
            Some(k) => self.vocab_size + k,
            None => Vocabulary::UNK_ID,
        }
    }

    pub fn resolve(&self, vocab: &Vocabulary, ext_id: usize) -> String {
        if ext_id < self.vocab_size {
            vocab.token(ext_id).to_string()
        } else {
            self.oov[ext_id - self.vocab_size].clone()
        }
    }

    /// Embedding id for an extended id.
    pub fn embed_id(&self, ext_id: usize) -> usize {
        if ext_id < self.vocab_size {
            ext_id
        } else {
            Vocabulary::UNK_ID
        }
    }
}

/// Mixes a vocabulary distribution with a copy distribution:
/// `P(w) = lambda * pi_v[w] + (1 - lambda) * sum_{j: copy_ids[j] = w} pi_s[j]`
/// over the extended vocabulary of width `ext_size`.
///
/// `one_minus_lambda` is passed separately so the caller can compute it
/// without cancellation.
pub fn output_distribution(
    g: &mut Graph,
    pi_v: Var,
    pi_s: Var,
    lambda: Var,
    one_minus_lambda: Var,
    copy_ids: &[usize],
    ext_size: usize,
) -> Var {
    let v = g.shape(pi_v).1;
    let gen = if v == ext_size {
        pi_v
    } else {
        let idx: Vec<usize> = (0..v).collect();
        g.scatter_cols(pi_v, &idx, ext_size)
    };
    let gen = g.scale_by(gen, lambda);
    let copy = g.scatter_cols(pi_s, copy_ids, ext_size);
    let copy = g.scale_by(copy, one_minus_lambda);
    g.add(gen, copy)
}

#[derive(Debug, Clone)]
pub struct PointerHead {
    w_d: ParamId,
    v_d: ParamId,
    v_vec: ParamId,
    u_d: ParamId,
}

impl PointerHead {
    pub fn new<R: Rng>(ps: &mut ParamSet, prefix: &str, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_d: ps.add(
                format!("{prefix}.ptr.w_d"),
                Tensor::glorot(hidden, hidden, rng),
            ),
            v_d: ps.add(
                format!("{prefix}.ptr.v_d"),
                Tensor::glorot(hidden, hidden, rng),
            ),
            v_vec: ps.add(format!("{prefix}.ptr.v"), Tensor::glorot(hidden, 1, rng)),
            u_d: ps.add(format!("{prefix}.ptr.u_d"), Tensor::glorot(hidden, 1, rng)),
        }
    }

    /// Projects the draft rows once per sentence: `p V_D`.
    pub fn project_draft(&self, g: &mut Graph, p: Var) -> Var {
        let v = g.param(self.v_d);
        g.matmul(p, v)
    }

    /// `beta_j = v . tanh(W_D s + V_D p_j)`, softmax over draft positions.
    pub fn attention(&self, g: &mut Graph, s: Var, projected_draft: Var) -> Var {
        let w = g.param(self.w_d);
        let ws = g.matmul(s, w);
        let pre = g.add_row(projected_draft, ws);
        let act = g.tanh(pre);
        let v = g.param(self.v_vec);
        let beta = g.matmul(act, v);
        let beta = g.transpose(beta);
        g.softmax(beta)
    }

    /// Returns `(lambda, 1 - lambda)` with `lambda = 1 / (1 + exp(u_D . s))`.
    pub fn gate(&self, g: &mut Graph, s: Var) -> (Var, Var) {
        let u = g.param(self.u_d);
        let logit = g.matmul(s, u);
        let neg = g.scale(logit, -1.0);
        (g.sigmoid(neg), g.sigmoid(logit))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradient_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(hidden: usize, seed: u64) -> (ParamSet, PointerHead) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let h = PointerHead::new(&mut ps, "t", hidden, &mut rng);
        (ps, h)
    }

    fn softmax_oracle(x: &[f64]) -> Vec<f64> {
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    #[test]
    fn oov_draft_tokens_get_extended_ids() {
        let vocab = Vocabulary::from_tokens(["a", "b"]);
        let d = PreparedDraft::new(&vocab, &["a", "zz", "b", "zz", "yy"]);
        assert_eq!(
            d.ids,
            vec![
                5,
                Vocabulary::UNK_ID,
                6,
                Vocabulary::UNK_ID,
                Vocabulary::UNK_ID
            ]
        );
        assert_eq!(d.copy_ids, vec![5, 7, 6, 7, 8]);
        assert_eq!(d.ext_size(), 9);
        assert_eq!(d.resolve(&vocab, 8), "yy");
        assert_eq!(d.target_id(&vocab, "zz"), 7);
        assert_eq!(d.target_id(&vocab, "never"), Vocabulary::UNK_ID);
    }

    #[test]
    fn uniform_when_scores_tie() {
        let (ps, h) = head(4, 1);
        let mut g = Graph::new(&ps);
        let s = g.constant(1, 4, vec![0.3, -0.2, 0.1, 0.0]);
        // identical draft rows give identical beta
        let p = g.constant(3, 4, [0.5, 0.1, -0.3, 0.2].repeat(3));
        let vp = h.project_draft(&mut g, p);
        let pi = h.attention(&mut g, s, vp);
        for v in g.value(pi) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_position_gets_all_mass() {
        let (ps, h) = head(4, 2);
        let mut g = Graph::new(&ps);
        let s = g.constant(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let p = g.constant(1, 4, vec![0.1, 0.2, 0.3, 0.4]);
        let vp = h.project_draft(&mut g, p);
        let pi = h.attention(&mut g, s, vp);
        assert_eq!(g.value(pi), &[1.0]);
    }

    #[test]
    fn attention_matches_hand_rolled_softmax() {
        let (ps, h) = head(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let s = Tensor::uniform(1, 3, 1.0, &mut rng);
        let p = Tensor::uniform(4, 3, 1.0, &mut rng);
        let mut g = Graph::new(&ps);
        let sv = g.input(&s);
        let pv = g.input(&p);
        let vp = h.project_draft(&mut g, pv);
        let pi = h.attention(&mut g, sv, vp);

        let get = |name: &str| ps.get(ps.id(name).unwrap()).clone();
        let (w, vd, v) = (get("t.ptr.w_d"), get("t.ptr.v_d"), get("t.ptr.v"));
        let mut beta = vec![0.0; 4];
        for (j, b) in beta.iter_mut().enumerate() {
            for k in 0..3 {
                let mut pre = 0.0;
                for t in 0..3 {
                    pre += s.get(0, t) * w.get(t, k) + p.get(j, t) * vd.get(t, k);
                }
                *b += v.get(k, 0) * pre.tanh();
            }
        }
        let expected = softmax_oracle(&beta);
        for (a, b) in g.value(pi).iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn gate_is_half_at_zero_and_small_for_large_logit() {
        let (mut ps, h) = head(2, 4);
        let u = ps.id("t.ptr.u_d").unwrap();
        ps.get_mut(u).data_mut().copy_from_slice(&[1.0, 0.0]);
        let mut g = Graph::new(&ps);
        let zero = g.constant(1, 2, vec![0.0, 5.0]);
        let (l, one_minus) = h.gate(&mut g, zero);
        assert_eq!(g.scalar(l), 0.5);
        assert_eq!(g.scalar(one_minus), 0.5);
        let big = g.constant(1, 2, vec![20.0, 0.0]);
        let (l, _) = h.gate(&mut g, big);
        let expected = 1.0 / (1.0 + 20f64.exp());
        assert!((g.scalar(l) - expected).abs() < 1e-20);
        assert!(g.scalar(l) < 3e-9);
    }

    #[test]
    fn gate_gradient_matches_finite_differences() {
        let (mut ps, h) = head(5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let s = Tensor::uniform(1, 5, 1.0, &mut rng);
        let report = gradient_check(
            &mut ps,
            |g| {
                let sv = g.input(&s);
                let (l, _) = h.gate(g, sv);
                l
            },
            &GradCheckOptions::default(),
        );
        assert!(report.passes(1e-4), "{report:?}");
    }

    fn mixture(
        lambda: f64,
        pi_v: &[f64],
        pi_s: &[f64],
        copy_ids: &[usize],
        ext: usize,
    ) -> Vec<f64> {
        let mut g = Graph::detached();
        let pv = g.constant(1, pi_v.len(), pi_v.to_vec());
        let psv = g.constant(1, pi_s.len(), pi_s.to_vec());
        let l = g.constant(1, 1, vec![lambda]);
        let ol = g.constant(1, 1, vec![1.0 - lambda]);
        let d = output_distribution(&mut g, pv, psv, l, ol, copy_ids, ext);
        g.value(d).to_vec()
    }

    #[test]
    fn gate_one_returns_vocab_distribution() {
        let pi_v = [0.1, 0.2, 0.3, 0.4];
        let out = mixture(1.0, &pi_v, &[0.5, 0.5], &[1, 4], 5);
        assert_eq!(&out[..4], &pi_v);
        assert_eq!(out[4], 0.0);
    }

    #[test]
    fn gate_zero_puts_all_mass_on_the_copied_token() {
        let vocab = Vocabulary::from_tokens(["b", "c"]);
        let draft = PreparedDraft::new(&vocab, &["a"]);
        let pi_v = vec![1.0 / vocab.len() as f64; vocab.len()];
        let out = mixture(0.0, &pi_v, &[1.0], &draft.copy_ids, draft.ext_size());
        let a = draft.target_id(&vocab, "a");
        assert_eq!(out[a], 1.0);
        assert_eq!(out.iter().sum::<f64>(), 1.0);
    }
}
