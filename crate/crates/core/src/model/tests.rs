use super::*;
use crate::tensor::{gradient_check, GradCheckOptions};
use rand::{Rng, SeedableRng};

fn vocab() -> Vocabulary {
    Vocabulary::from_tokens(["a", "b", "c", "d", "e"])
}

fn model(backbone: Backbone, copy: bool, share: bool, seed: u64) -> Model {
    let config = ModelConfig {
        backbone,
        hidden: 8,
        share_encoders: share,
        copy,
        max_positions: 16,
    };
    Model::new(config, vocab(), seed).unwrap()
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

const BACKBONES: [Backbone; 2] = [Backbone::Gru, Backbone::Transformer];

#[test]
fn recurrent_encodings_include_sos_and_eos_rows() {
    let m = model(Backbone::Gru, true, true, 1);
    let mut g = Graph::new(m.params());
    let enc = m.encode(&mut g, &toks("a"), &toks("a b c d")).unwrap();
    let (h, p) = enc.representations(&mut g);
    assert_eq!(g.shape(h), (3, 8));
    assert_eq!(g.shape(p.unwrap()), (6, 8));
    let empty: [&str; 0] = [];
    let enc = m.encode(&mut g, &toks("a b"), &empty).unwrap();
    let (_, p) = enc.representations(&mut g);
    assert_eq!(g.shape(p.unwrap()), (2, 8));
}

#[test]
fn transformer_packs_empty_draft_as_zero_tokens() {
    let m = model(Backbone::Transformer, true, true, 1);
    let mut g = Graph::new(m.params());
    let empty: [&str; 0] = [];
    let enc = m.encode(&mut g, &toks("a b c"), &empty).unwrap();
    let (h, p) = enc.representations(&mut g);
    assert_eq!(g.shape(h), (3, 8));
    assert!(p.is_none());
}

#[test]
fn encoding_is_deterministic_and_direction_sensitive() {
    let m = model(Backbone::Gru, true, true, 2);
    let mut g = Graph::new(m.params());
    let a = m.encode(&mut g, &toks("a b c"), &toks("d")).unwrap();
    let b = m.encode(&mut g, &toks("a b c"), &toks("d")).unwrap();
    let c = m.encode(&mut g, &toks("c b a"), &toks("d")).unwrap();
    let (ha, _) = a.representations(&mut g);
    let (hb, _) = b.representations(&mut g);
    let (hc, _) = c.representations(&mut g);
    assert_eq!(g.value(ha), g.value(hb));
    assert_ne!(g.value(ha), g.value(hc));
}

#[test]
fn empty_source_is_rejected() {
    let m = model(Backbone::Gru, true, true, 3);
    let mut g = Graph::new(m.params());
    let empty: [&str; 0] = [];
    assert!(matches!(
        m.encode(&mut g, &empty, &toks("a")),
        Err(Error::Contract(_))
    ));
}

/// Probability of each surface token, built directly from the mixture
/// definition over the union of vocabulary and draft tokens.
fn mixture_oracle(
    vocab: &Vocabulary,
    draft: &[String],
    pi_v: &[f64],
    pi_s: &[f64],
    lambda: f64,
) -> Vec<(String, f64)> {
    let mut union: Vec<String> = vocab.tokens().to_vec();
    for t in draft {
        if !union.contains(t) {
            union.push(t.clone());
        }
    }
    union
        .into_iter()
        .map(|w| {
            let gen = vocab.id(&w).map_or(0.0, |i| lambda * pi_v[i]);
            let copy: f64 = draft
                .iter()
                .zip(pi_s)
                .filter(|(t, _)| **t == w)
                .map(|(_, p)| p)
                .sum();
            (w, gen + (1.0 - lambda) * copy)
        })
        .collect()
}

#[test]
fn next_token_distribution_matches_the_mixture_and_sums_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let pool = ["a", "b", "c", "d", "e", "zz", "yy"];
    for backbone in BACKBONES {
        for seed in 0..20 {
            let m = model(backbone, true, true, seed);
            let len = rng.gen_range(1..=6);
            let draft: Vec<String> = (0..len)
                .map(|_| pool[rng.gen_range(0..pool.len())].to_string())
                .collect();
            let mut g = Graph::new(m.params());
            let enc = m.encode(&mut g, &toks("a b c"), &draft).unwrap();
            let out = m.next_token(&mut g, &enc, &toks("a zz"));
            let dist = g.value(out.dist).to_vec();
            assert!((dist.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let lambda = g.scalar(out.lambda.unwrap());
            let pi_v = g.value(out.pi_v).to_vec();
            let pi_s = g.value(out.pi_s.unwrap()).to_vec();
            let oracle = mixture_oracle(m.vocab(), &draft, &pi_v, &pi_s, lambda);
            let total: f64 = oracle.iter().map(|(_, p)| p).sum();
            assert!((total - 1.0).abs() <= 1e-9);
            for (w, p) in oracle {
                let id = enc.draft().target_id(m.vocab(), &w);
                assert!((dist[id] - p).abs() <= 1e-12, "{backbone} {w}");
            }
        }
    }
}

#[test]
fn copy_off_gives_the_vocabulary_distribution() {
    for backbone in BACKBONES {
        let m = model(backbone, false, true, 5);
        let mut g = Graph::new(m.params());
        let enc = m.encode(&mut g, &toks("a b c"), &toks("c zz a")).unwrap();
        let y = toks("c b a");
        let outs = m.teacher_forced(&mut g, &enc, &y);
        let mut expected = 0.0;
        let targets = [
            m.vocab().id("c").unwrap(),
            m.vocab().id("b").unwrap(),
            m.vocab().id("a").unwrap(),
            2,
        ];
        for (o, &t) in outs.iter().zip(&targets) {
            assert!(o.lambda.is_none());
            let v = m.vocab().len();
            assert_eq!(&g.value(o.dist)[..v], g.value(o.pi_v));
            assert_eq!(g.value(o.dist)[v], 0.0);
            expected -= g.value(o.pi_v)[t].ln();
        }
        let loss = m.rewrite_loss(&mut g, &enc, &y);
        assert!((g.scalar(loss) - expected).abs() <= 1e-12);
    }
}

#[test]
fn uniform_vocabulary_distribution_costs_log_v_per_token() {
    for backbone in BACKBONES {
        let mut m = model(backbone, false, true, 6);
        for name in ["rw.out.w", "rw.out.b"] {
            let id = m.params().id(name).unwrap();
            m.params_mut().get_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new(m.params());
        let enc = m.encode(&mut g, &toks("a b"), &toks("b")).unwrap();
        let loss = m.rewrite_loss(&mut g, &enc, &toks("a b c"));
        let expected = 4.0 * (m.vocab().len() as f64).ln();
        assert!((g.scalar(loss) - expected).abs() < 1e-12);
    }
}

#[test]
fn rewrite_loss_gradients_match_finite_differences() {
    for backbone in BACKBONES {
        let mut m = model(backbone, true, true, 7);
        let x = toks("a b c");
        let z = toks("c zz");
        let y = toks("c zz a");
        let mut ps = m.params().clone();
        let opts = GradCheckOptions {
            max_entries_per_param: Some(6),
            ..GradCheckOptions::default()
        };
        let report = gradient_check(
            &mut ps,
            |g| {
                let enc = m.encode(g, &x, &z).unwrap();
                m.rewrite_loss(g, &enc, &y)
            },
            &opts,
        );
        assert!(report.passes(1e-4), "{backbone}: {report:?}");
        *m.params_mut() = ps;
    }
}

#[test]
fn score_gradients_match_finite_differences() {
    for backbone in BACKBONES {
        for share in [true, false] {
            let m = model(backbone, true, share, 8);
            let x = toks("a b c");
            let z = toks("c b");
            let mut ps = m.params().clone();
            let opts = GradCheckOptions {
                max_entries_per_param: Some(6),
                ..GradCheckOptions::default()
            };
            let report = gradient_check(
                &mut ps,
                |g| {
                    let enc = m.encode(g, &x, &z).unwrap();
                    m.score(g, &enc)
                },
                &opts,
            );
            assert!(report.passes(1e-4), "{backbone} share={share}: {report:?}");
        }
    }
}

#[test]
fn shared_evaluator_reads_the_rewriter_encodings() {
    let m = model(Backbone::Gru, true, true, 9);
    let mut g = Graph::new(m.params());
    let enc = m.encode(&mut g, &toks("a b"), &toks("c d")).unwrap();
    let (h, p) = enc.representations(&mut g);
    let (he, pe) = m.evaluator_inputs(&mut g, &enc);
    assert_eq!(g.value(h), g.value(he));
    assert_eq!(g.value(p.unwrap()), g.value(pe));
}

#[test]
fn unshared_evaluator_with_copied_weights_matches_shared() {
    for backbone in BACKBONES {
        let shared = model(backbone, true, true, 10);
        let mut own = model(backbone, true, false, 11);
        let names: Vec<String> = own.params().iter().map(|(_, n, _)| n.to_string()).collect();
        for name in names {
            let source = if let Some(rest) = name
                .strip_prefix("ev.")
                .filter(|_| name != "ev.w_e" && name != "ev.v_e")
            {
                format!("rw.{rest}")
            } else {
                name.clone()
            };
            let t = shared
                .params()
                .get(shared.params().id(&source).unwrap())
                .clone();
            own.params_mut().assign(&name, &t).unwrap();
        }
        let (x, z) = (toks("a b c"), toks("c a"));
        assert_eq!(
            shared.evaluate(&x, &z).unwrap(),
            own.evaluate(&x, &z).unwrap(),
            "{backbone}"
        );
    }
}

#[test]
fn beam_of_one_is_greedy() {
    for backbone in BACKBONES {
        for seed in 0..5 {
            let m = model(backbone, true, true, 20 + seed);
            let mut g = Graph::new(m.params());
            let enc = m.encode(&mut g, &toks("a b c d"), &toks("d zz b")).unwrap();
            let greedy = m.greedy(&mut g, &enc, 6);
            let beam = m.beam(&mut g, &enc, 1, 6);
            assert_eq!(greedy, beam);
            let wide = m.beam(&mut g, &enc, 4, 6);
            assert!(wide.normalized_score() >= greedy.normalized_score());
        }
    }
}

#[test]
fn greedy_is_deterministic_and_resolves_copied_tokens() {
    let m = model(Backbone::Gru, true, true, 30);
    let a = m.rewrite(&toks("a b"), &toks("zz zz"), 1, 5).unwrap();
    let b = m.rewrite(&toks("a b"), &toks("zz zz"), 1, 5).unwrap();
    assert_eq!(a, b);
    for (t, &i) in a.tokens.iter().zip(&a.ids) {
        if i >= m.vocab().len() {
            assert_eq!(t, "zz");
        }
    }
}

#[test]
#[allow(clippy::needless_range_loop)]
fn wide_beam_with_two_steps_equals_exhaustive_search() {
    let v = Vocabulary::from_tokens(["a", "b"]);
    for backbone in BACKBONES {
        for seed in 0..3 {
            let config = ModelConfig {
                backbone,
                hidden: 4,
                share_encoders: true,
                copy: true,
                max_positions: 8,
            };
            let m = Model::new(config, v.clone(), seed).unwrap();
            let (x, z) = (toks("a b"), toks("b qq"));
            let mut g = Graph::new(m.params());
            let enc = m.encode(&mut g, &x, &z).unwrap();
            let ext = enc.draft().ext_size();
            let tok = |i: usize| enc.draft().resolve(m.vocab(), i);

            let mut best = (f64::NEG_INFINITY, Vec::new());
            let consider = |best: &mut (f64, Vec<usize>), score: f64, ids: Vec<usize>| {
                if score > best.0 {
                    *best = (score, ids);
                }
            };
            let empty: [String; 0] = [];
            let out = m.next_token(&mut g, &enc, &empty);
            let first = g.value(out.dist).to_vec();
            consider(&mut best, first[2].ln(), vec![]);
            for t1 in (0..ext).filter(|&t| t != 2) {
                let out = m.next_token(&mut g, &enc, &[tok(t1)]);
                let second = g.value(out.dist).to_vec();
                for t2 in 0..ext {
                    let lp = first[t1].ln() + second[t2].ln();
                    let ids = if t2 == 2 { vec![t1] } else { vec![t1, t2] };
                    consider(&mut best, lp / 2.0, ids);
                }
            }
            let beam = m.beam(&mut g, &enc, ext, 2);
            assert_eq!(beam.ids, best.1, "{backbone} seed {seed}");
            assert!((beam.normalized_score() - best.0).abs() < 1e-12);
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_behaviour() {
    for backbone in BACKBONES {
        let m = model(backbone, true, false, 40);
        let back =
            Model::from_checkpoint(&Checkpoint::parse(&m.to_checkpoint().to_text()).unwrap())
                .unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.vocab(), m.vocab());
        let (x, z) = (toks("a c"), toks("e"));
        assert_eq!(back.evaluate(&x, &z).unwrap(), m.evaluate(&x, &z).unwrap());
        assert_eq!(
            back.rewrite(&x, &z, 2, 4).unwrap(),
            m.rewrite(&x, &z, 2, 4).unwrap()
        );
    }
}

#[test]
fn odd_hidden_size_is_a_config_error() {
    let config = ModelConfig {
        hidden: 7,
        ..ModelConfig::default()
    };
    assert!(matches!(
        Model::new(config, vocab(), 0),
        Err(Error::Config(_))
    ));
}
