//! Rewriter and evaluator networks behind a single [`Model`].
//!
//! Both backbones expose the same surface: encode a `(source, draft)` pair
//! once, then either score it or decode a new draft from it.

mod decode;
pub mod evaluator;
pub mod gru;
pub mod pointer;
mod rnn;
pub mod transformer;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    read_checkpoint, write_checkpoint, Checkpoint, Graph, ParamId, ParamSet, Tensor, Var,
};
use crate::vocab::Vocabulary;

pub use decode::Decoded;
pub use evaluator::{co_attention, hinge_loss, pooled_score, CoAttention};
pub use pointer::{output_distribution, PreparedDraft};
pub use transformer::{build_mask, pack_input, AttentionMask, PackedInput, Segment};

use pointer::PointerHead;
use rnn::{GruCtx, GruNet, GruState};
use transformer::TransformerNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    Gru,
    Transformer,
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru" | "rnn" => Ok(Backbone::Gru),
            "transformer" => Ok(Backbone::Transformer),
            other => Err(Error::Config(format!(
                "unknown backbone {other:?} (expected gru or transformer)"
            ))),
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::Gru => "gru",
            Backbone::Transformer => "transformer",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: Backbone,
    /// Hidden width `d`; must be even for the bidirectional encoders.
    pub hidden: usize,
    /// Evaluator reads the rewriter's encoders instead of its own.
    pub share_encoders: bool,
    /// Enables copying from the previous draft; when off the gate is
    /// fixed at 1.
    pub copy: bool,
    /// Size of the learned position table (transformer only).
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Gru,
            hidden: 32,
            share_encoders: true,
            copy: true,
            max_positions: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || !self.hidden.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "hidden size must be positive and even, got {}",
                self.hidden
            )));
        }
        if self.max_positions == 0 {
            return Err(Error::Config("max_positions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum Net {
    Gru(GruNet),
    Transformer(TransformerNet),
}

/// A `(source, draft)` pair encoded on a graph.
#[derive(Debug, Clone)]
pub struct Encoding {
    source_ids: Vec<usize>,
    draft: PreparedDraft,
    inner: EncodingInner,
}

#[derive(Debug, Clone)]
enum EncodingInner {
    Gru { h: Var, p: Var },
    Transformer { out: Var, packed: PackedInput },
}

impl Encoding {
    pub fn draft(&self) -> &PreparedDraft {
        &self.draft
    }

    /// Source rows and draft rows as seen by the rewriter. For the
    /// recurrent backbone these include the SOS/EOS rows; for the
    /// transformer they are slices of the packed output (the draft part is
    /// `None` when empty).
    pub fn representations(&self, g: &mut Graph) -> (Var, Option<Var>) {
        match &self.inner {
            EncodingInner::Gru { h, p } => (*h, Some(*p)),
            EncodingInner::Transformer { out, packed } => {
                let h = g.slice_rows(*out, 0, packed.source_len);
                let p = (packed.draft_len > 0)
                    .then(|| g.slice_rows(*out, packed.source_len + 1, packed.draft_len));
                (h, p)
            }
        }
    }
}

/// Values produced for one target position.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// Distribution over the extended vocabulary.
    pub dist: Var,
    pub pi_v: Var,
    pub pi_s: Option<Var>,
    pub lambda: Option<Var>,
}

#[derive(Debug, Clone)]
pub(crate) struct RewriteCtx {
    ext_size: usize,
    copy_ids: Vec<usize>,
    copy_rows: Option<Var>,
    inner: CtxInner,
}

#[derive(Debug, Clone)]
enum CtxInner {
    Gru(GruCtx),
    Transformer { memory: Var },
}

#[derive(Debug, Clone)]
pub(crate) enum DecState {
    Gru(GruState),
    Transformer(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ParamSet,
    net: Net,
    head: PointerHead,
    out_w: ParamId,
    out_b: ParamId,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let (d, v) = (config.hidden, vocab.len());
        let net = match config.backbone {
            Backbone::Gru => Net::Gru(GruNet::new(&mut ps, v, d, config.share_encoders, &mut rng)),
            Backbone::Transformer => Net::Transformer(TransformerNet::new(
                &mut ps,
                v,
                d,
                config.max_positions,
                config.share_encoders,
                &mut rng,
            )),
        };
        let head = PointerHead::new(&mut ps, "rw", d, &mut rng);
        let out_w = ps.add("rw.out.w", Tensor::glorot(d, v, &mut rng));
        let out_b = ps.add("rw.out.b", Tensor::zeros(1, v));
        Ok(Self {
            config,
            vocab,
            params: ps,
            net,
            head,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Encodes a source and a draft (possibly empty).
    pub fn encode<S: AsRef<str>, T: AsRef<str>>(
        &self,
        g: &mut Graph,
        x: &[S],
        z: &[T],
    ) -> Result<Encoding> {
        if x.is_empty() {
            return Err(Error::Contract("source sentence is empty".into()));
        }
        let source_ids = self.vocab.encode_all(x);
        let draft = PreparedDraft::new(&self.vocab, z);
        let inner = match &self.net {
            Net::Gru(net) => {
                let h = net.enc.encode_source(g, &source_ids);
                let p = net.enc.encode_target(g, &draft.ids);
                EncodingInner::Gru { h, p }
            }
            Net::Transformer(net) => {
                let packed = pack_input(&source_ids, &draft.ids);
                let out = net.encode(g, &packed);
                EncodingInner::Transformer { out, packed }
            }
        };
        Ok(Encoding {
            source_ids,
            draft,
            inner,
        })
    }

    /// Evaluator score `q` of the encoded draft.
    pub fn score(&self, g: &mut Graph, enc: &Encoding) -> Var {
        match (&self.net, &enc.inner) {
            (Net::Gru(net), EncodingInner::Gru { h, p }) => match &net.ev_enc {
                None => net.eval.score(g, *h, *p),
                Some(own) => {
                    let h = own.encode_source(g, &enc.source_ids);
                    let p = own.encode_target(g, &enc.draft.ids);
                    net.eval.score(g, h, p)
                }
            },
            (Net::Transformer(net), EncodingInner::Transformer { out, packed }) => {
                net.score(g, packed, *out)
            }
            _ => unreachable!("encoding produced by a different backbone"),
        }
    }

    /// The source and draft rows the evaluator reads.
    pub fn evaluator_inputs(&self, g: &mut Graph, enc: &Encoding) -> (Var, Var) {
        match (&self.net, &enc.inner) {
            (Net::Gru(net), EncodingInner::Gru { h, p }) => match &net.ev_enc {
                None => (*h, *p),
                Some(own) => (
                    own.encode_source(g, &enc.source_ids),
                    own.encode_target(g, &enc.draft.ids),
                ),
            },
            _ => {
                let (h, p) = enc.representations(g);
                (h, p.unwrap_or(h))
            }
        }
    }

    pub(crate) fn start(&self, g: &mut Graph, enc: &Encoding) -> (RewriteCtx, DecState) {
        let ext_size = enc.draft.ext_size();
        let copy_ids = enc.draft.copy_ids.clone();
        match (&self.net, &enc.inner) {
            (Net::Gru(net), EncodingInner::Gru { h, p }) => {
                let ctx = net.context(g, &self.head, *h, *p, enc.draft.ids.len());
                let state = net.init_state(g, &ctx);
                (
                    RewriteCtx {
                        ext_size,
                        copy_ids,
                        copy_rows: None,
                        inner: CtxInner::Gru(ctx),
                    },
                    DecState::Gru(state),
                )
            }
            (Net::Transformer(_), EncodingInner::Transformer { out, packed }) => {
                let copy_rows = (packed.draft_len > 0).then(|| {
                    let rows = g.slice_rows(*out, packed.source_len + 1, packed.draft_len);
                    self.head.project_draft(g, rows)
                });
                let ctx = RewriteCtx {
                    ext_size,
                    copy_ids,
                    copy_rows,
                    inner: CtxInner::Transformer { memory: *out },
                };
                (ctx, DecState::Transformer(Vec::new()))
            }
            _ => unreachable!("encoding produced by a different backbone"),
        }
    }

    /// Feeds the previous output (an extended id) and returns the next
    /// distribution.
    pub(crate) fn step(
        &self,
        g: &mut Graph,
        ctx: &RewriteCtx,
        state: &DecState,
        prev: usize,
    ) -> (DecState, StepOutput) {
        let embed_id = if prev < self.vocab.len() {
            prev
        } else {
            Vocabulary::UNK_ID
        };
        match (&self.net, &ctx.inner, state) {
            (Net::Gru(net), CtxInner::Gru(gctx), DecState::Gru(st)) => {
                let out = net.step(g, &self.head, gctx, st, embed_id);
                let step = self.head_output(g, ctx, out.s, out.features, out.pi_s);
                (DecState::Gru(out.state), step)
            }
            (
                Net::Transformer(net),
                CtxInner::Transformer { memory },
                DecState::Transformer(prefix),
            ) => {
                let mut prefix = prefix.clone();
                prefix.push(embed_id);
                let rows = net.decode(g, *memory, &prefix);
                let s = g.row(rows, prefix.len() - 1);
                let step = self.head_output(g, ctx, s, s, None);
                (DecState::Transformer(prefix), step)
            }
            _ => unreachable!("decoder state from a different backbone"),
        }
    }

    fn head_output(
        &self,
        g: &mut Graph,
        ctx: &RewriteCtx,
        s: Var,
        features: Var,
        pi_s: Option<Var>,
    ) -> StepOutput {
        let w = g.param(self.out_w);
        let b = g.param(self.out_b);
        let logits = g.matmul(features, w);
        let logits = g.add_row(logits, b);
        let pi_v = g.softmax(logits);
        let pi_s = if ctx.copy_ids.is_empty() {
            None
        } else {
            pi_s.or_else(|| ctx.copy_rows.map(|rows| self.head.attention(g, s, rows)))
        };
        match pi_s {
            Some(pi_s) if self.config.copy => {
                let (lambda, one_minus) = self.head.gate(g, s);
                let dist = output_distribution(
                    g,
                    pi_v,
                    pi_s,
                    lambda,
                    one_minus,
                    &ctx.copy_ids,
                    ctx.ext_size,
                );
                StepOutput {
                    dist,
                    pi_v,
                    pi_s: Some(pi_s),
                    lambda: Some(lambda),
                }
            }
            _ => {
                let v = self.vocab.len();
                let dist = if ctx.ext_size == v {
                    pi_v
                } else {
                    let idx: Vec<usize> = (0..v).collect();
                    g.scatter_cols(pi_v, &idx, ctx.ext_size)
                };
                StepOutput {
                    dist,
                    pi_v,
                    pi_s,
                    lambda: None,
                }
            }
        }
    }

    fn target_ids<S: AsRef<str>>(&self, enc: &Encoding, y: &[S]) -> Vec<usize> {
        y.iter()
            .map(|t| enc.draft.target_id(&self.vocab, t.as_ref()))
            .collect()
    }

    /// Step outputs under teacher forcing on `y`: one per token of `y`
    /// followed by one for EOS.
    pub fn teacher_forced<S: AsRef<str>>(
        &self,
        g: &mut Graph,
        enc: &Encoding,
        y: &[S],
    ) -> Vec<StepOutput> {
        let targets = self.target_ids(enc, y);
        let (ctx, state) = self.start(g, enc);
        let mut inputs = vec![Vocabulary::SOS_ID];
        inputs.extend(&targets);
        match (&self.net, &ctx.inner) {
            (Net::Transformer(net), CtxInner::Transformer { memory }) => {
                let embed: Vec<usize> = inputs
                    .iter()
                    .map(|&i| {
                        if i < self.vocab.len() {
                            i
                        } else {
                            Vocabulary::UNK_ID
                        }
                    })
                    .collect();
                let rows = net.decode(g, *memory, &embed);
                (0..inputs.len())
                    .map(|i| {
                        let s = g.row(rows, i);
                        self.head_output(g, &ctx, s, s, None)
                    })
                    .collect()
            }
            _ => {
                let mut state = state;
                let mut outs = Vec::with_capacity(inputs.len());
                for &prev in &inputs {
                    let (next, out) = self.step(g, &ctx, &state, prev);
                    outs.push(out);
                    state = next;
                }
                outs
            }
        }
    }

    /// Negative log likelihood of `y` followed by EOS, conditioning on the
    /// gold prefix.
    pub fn rewrite_loss<S: AsRef<str>>(&self, g: &mut Graph, enc: &Encoding, y: &[S]) -> Var {
        let mut targets = self.target_ids(enc, y);
        targets.push(Vocabulary::EOS_ID);
        let outs = self.teacher_forced(g, enc, y);
        let picks: Vec<Var> = outs
            .iter()
            .zip(&targets)
            .map(|(o, &t)| g.pick(o.dist, t))
            .collect();
        let row = g.concat_cols(&picks);
        let logs = g.log(row);
        let total = g.sum(logs);
        g.scale(total, -1.0)
    }

    /// Next-token distribution after a gold prefix.
    pub fn next_token<S: AsRef<str>>(
        &self,
        g: &mut Graph,
        enc: &Encoding,
        prefix: &[S],
    ) -> StepOutput {
        *self
            .teacher_forced(g, enc, prefix)
            .last()
            .expect("at least one step")
    }

    pub fn greedy(&self, g: &mut Graph, enc: &Encoding, max_len: usize) -> Decoded {
        decode::greedy(self, g, enc, max_len)
    }

    pub fn beam(&self, g: &mut Graph, enc: &Encoding, beam: usize, max_len: usize) -> Decoded {
        decode::beam(self, g, enc, beam, max_len)
    }

    /// Rewrites `z` given `x` on a fresh graph; `beam <= 1` is greedy.
    pub fn rewrite<S: AsRef<str>, T: AsRef<str>>(
        &self,
        x: &[S],
        z: &[T],
        beam: usize,
        max_len: usize,
    ) -> Result<Decoded> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode(&mut g, x, z)?;
        Ok(if beam <= 1 {
            self.greedy(&mut g, &enc, max_len)
        } else {
            self.beam(&mut g, &enc, beam, max_len)
        })
    }

    /// Evaluator score on a fresh graph.
    pub fn evaluate<S: AsRef<str>, T: AsRef<str>>(&self, x: &[S], z: &[T]) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode(&mut g, x, z)?;
        let q = self.score(&mut g, &enc);
        Ok(g.scalar(q))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let meta = vec![
            ("model.backbone".to_string(), c.backbone.to_string()),
            ("model.hidden".to_string(), c.hidden.to_string()),
            (
                "model.share_encoders".to_string(),
                c.share_encoders.to_string(),
            ),
            ("model.copy".to_string(), c.copy.to_string()),
            (
                "model.max_positions".to_string(),
                c.max_positions.to_string(),
            ),
            ("model.vocab".to_string(), self.vocab.tokens().join(" ")),
        ];
        let tensors = self
            .params
            .iter()
            .map(|(_, name, t)| (name.to_string(), t.clone()))
            .collect();
        Checkpoint { meta, tensors }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |k: &str| {
            ck.meta(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing meta {k}")))
        };
        let parse_err = |k: &str| Error::Checkpoint(format!("bad meta {k}"));
        let config = ModelConfig {
            backbone: get("model.backbone")?.parse()?,
            hidden: get("model.hidden")?
                .parse()
                .map_err(|_| parse_err("model.hidden"))?,
            share_encoders: get("model.share_encoders")?
                .parse()
                .map_err(|_| parse_err("model.share_encoders"))?,
            copy: get("model.copy")?
                .parse()
                .map_err(|_| parse_err("model.copy"))?,
            max_positions: get("model.max_positions")?
                .parse()
                .map_err(|_| parse_err("model.max_positions"))?,
        };
        let vocab = Vocabulary::parse(
            &get("model.vocab")?
                .split(' ')
                .collect::<Vec<_>>()
                .join("\n"),
        )?;
        let mut model = Model::new(config, vocab, 0)?;
        let names: Vec<String> = model.params.iter().map(|(_, n, _)| n.to_string()).collect();
        for name in names {
            let t = ck
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            model.params.assign(&name, t)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}

#[cfg(test)]
mod tests;
