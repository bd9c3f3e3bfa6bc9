//! Recurrent backbone: bidirectional GRU encoders and an attentional GRU
//! decoder that also attends over the previous draft.

use rand::Rng;

use super::evaluator::EvaluatorHead;
use super::gru::{BiGru, GruCell};
use super::pointer::PointerHead;
use crate::tensor::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::vocab::Vocabulary;

/// Embedding tables and bidirectional encoders for sources and drafts.
#[derive(Debug, Clone)]
pub(crate) struct GruEncoders {
    src_emb: ParamId,
    tgt_emb: ParamId,
    src: BiGru,
    tgt: BiGru,
}

impl GruEncoders {
    fn new<R: Rng>(ps: &mut ParamSet, prefix: &str, vocab: usize, d: usize, rng: &mut R) -> Self {
        Self {
            src_emb: ps.add(
                format!("{prefix}.src_emb"),
                Tensor::uniform(vocab, d, 0.1, rng),
            ),
            tgt_emb: ps.add(
                format!("{prefix}.tgt_emb"),
                Tensor::uniform(vocab, d, 0.1, rng),
            ),
            src: BiGru::new(ps, &format!("{prefix}.src_enc"), d, d, rng),
            tgt: BiGru::new(ps, &format!("{prefix}.tgt_enc"), d, d, rng),
        }
    }

    fn wrap(ids: &[usize]) -> Vec<usize> {
        let mut w = Vec::with_capacity(ids.len() + 2);
        w.push(Vocabulary::SOS_ID);
        w.extend_from_slice(ids);
        w.push(Vocabulary::EOS_ID);
        w
    }

    /// Encodes `[SOS] x [EOS]`; one row per wrapped token.
    pub(crate) fn encode_source(&self, g: &mut Graph, ids: &[usize]) -> Var {
        let emb = g.param(self.src_emb);
        let x = g.gather_rows(emb, &Self::wrap(ids));
        self.src.encode(g, x)
    }

    /// Encodes `[SOS] z [EOS]`; the empty draft gives two rows.
    pub(crate) fn encode_target(&self, g: &mut Graph, ids: &[usize]) -> Var {
        let emb = g.param(self.tgt_emb);
        let x = g.gather_rows(emb, &Self::wrap(ids));
        self.tgt.encode(g, x)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct GruNet {
    pub(crate) enc: GruEncoders,
    /// Separate evaluator encoders when sharing is disabled.
    pub(crate) ev_enc: Option<GruEncoders>,
    pub(crate) eval: EvaluatorHead,
    dec: GruCell,
    init_w: ParamId,
    init_b: ParamId,
    att_w: ParamId,
    att_u: ParamId,
    att_v: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Per-sentence decoder context.
#[derive(Debug, Clone)]
pub(crate) struct GruCtx {
    h: Var,
    uah: Var,
    /// Draft rows used for the pointer context, and their projection.
    draft_rows: Option<(Var, Var)>,
    /// Context fed in place of the pointer context when the draft is empty.
    empty_draft: Var,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GruState {
    s: Var,
    ctx: Var,
    dctx: Var,
}

pub(crate) struct GruStep {
    pub state: GruState,
    pub s: Var,
    pub features: Var,
    pub pi_s: Option<Var>,
}

impl GruNet {
    pub(crate) fn new<R: Rng>(
        ps: &mut ParamSet,
        vocab: usize,
        d: usize,
        share: bool,
        rng: &mut R,
    ) -> Self {
        let enc = GruEncoders::new(ps, "rw", vocab, d, rng);
        let ev_enc = (!share).then(|| GruEncoders::new(ps, "ev", vocab, d, rng));
        let eval = EvaluatorHead::new(ps, d, rng);
        Self {
            enc,
            ev_enc,
            eval,
            dec: GruCell::new(ps, "rw.dec", 3 * d, d, rng),
            init_w: ps.add("rw.dec.init_w", Tensor::glorot(d, d, rng)),
            init_b: ps.add("rw.dec.init_b", Tensor::zeros(1, d)),
            att_w: ps.add("rw.att.w", Tensor::glorot(d, d, rng)),
            att_u: ps.add("rw.att.u", Tensor::glorot(d, d, rng)),
            att_v: ps.add("rw.att.v", Tensor::glorot(d, 1, rng)),
            out_w: ps.add("rw.dec.out_w", Tensor::glorot(3 * d, d, rng)),
            out_b: ps.add("rw.dec.out_b", Tensor::zeros(1, d)),
        }
    }

    /// `h` and `p` include the SOS/EOS rows; draft content rows are
    /// `1..=draft_len` of `p`.
    pub(crate) fn context(
        &self,
        g: &mut Graph,
        head: &PointerHead,
        h: Var,
        p: Var,
        draft_len: usize,
    ) -> GruCtx {
        let u = g.param(self.att_u);
        let uah = g.matmul(h, u);
        let draft_rows = (draft_len > 0).then(|| {
            let rows = g.slice_rows(p, 1, draft_len);
            let proj = head.project_draft(g, rows);
            (rows, proj)
        });
        let empty_draft = g.mean_rows(p);
        GruCtx {
            h,
            uah,
            draft_rows,
            empty_draft,
        }
    }

    pub(crate) fn init_state(&self, g: &mut Graph, ctx: &GruCtx) -> GruState {
        let d = self.dec.hidden();
        let mean = g.mean_rows(ctx.h);
        let w = g.param(self.init_w);
        let b = g.param(self.init_b);
        let s = g.matmul(mean, w);
        let s = g.add_row(s, b);
        let s = g.tanh(s);
        let zeros = g.zeros(1, d);
        GruState {
            s,
            ctx: zeros,
            dctx: zeros,
        }
    }

    pub(crate) fn step(
        &self,
        g: &mut Graph,
        head: &PointerHead,
        ctx: &GruCtx,
        state: &GruState,
        embed_id: usize,
    ) -> GruStep {
        let emb = g.param(self.enc.tgt_emb);
        let e = g.gather_rows(emb, &[embed_id]);
        let input = g.concat_cols(&[e, state.ctx, state.dctx]);
        let s = self.dec.step(g, input, state.s);

        let aw = g.param(self.att_w);
        let av = g.param(self.att_v);
        let sw = g.matmul(s, aw);
        let pre = g.add_row(ctx.uah, sw);
        let act = g.tanh(pre);
        let scores = g.matmul(act, av);
        let scores = g.transpose(scores);
        let alpha = g.softmax(scores);
        let c = g.matmul(alpha, ctx.h);

        let (dctx, pi_s) = match ctx.draft_rows {
            Some((rows, proj)) => {
                let pi = head.attention(g, s, proj);
                (g.matmul(pi, rows), Some(pi))
            }
            None => (ctx.empty_draft, None),
        };

        let ow = g.param(self.out_w);
        let ob = g.param(self.out_b);
        let cat = g.concat_cols(&[s, c, dctx]);
        let o = g.matmul(cat, ow);
        let o = g.add_row(o, ob);
        let features = g.tanh(o);
        GruStep {
            state: GruState { s, ctx: c, dctx },
            s,
            features,
            pi_s,
        }
    }
}
