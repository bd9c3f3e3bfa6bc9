//! Single-layer, single-head transformer pieces: packed input with an
//! ALIGN separator, the block attention mask, encoder and decoder blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::vocab::Vocabulary;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Source = 0,
    Align = 1,
    Draft = 2,
    Target = 3,
}

pub const NUM_SEGMENTS: usize = 4;

/// `x ⊕ [ALIGN] ⊕ z` with per-position segment labels and positions.
/// Positions restart at 0 in the draft segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedInput {
    pub ids: Vec<usize>,
    pub segments: Vec<Segment>,
    pub positions: Vec<usize>,
    pub source_len: usize,
    pub draft_len: usize,
}

impl PackedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn align_index(&self) -> usize {
        self.source_len
    }

    /// Splits the ids back into source and draft by segment label.
    pub fn unpack(&self) -> (Vec<usize>, Vec<usize>) {
        let pick = |seg: Segment| {
            self.ids
                .iter()
                .zip(&self.segments)
                .filter(|(_, s)| **s == seg)
                .map(|(i, _)| *i)
                .collect()
        };
        (pick(Segment::Source), pick(Segment::Draft))
    }
}

pub fn pack_input(x: &[usize], z: &[usize]) -> PackedInput {
    assert!(!x.is_empty(), "source must be non-empty");
    let mut ids = x.to_vec();
    ids.push(Vocabulary::ALIGN_ID);
    ids.extend_from_slice(z);
    let mut segments = vec![Segment::Source; x.len()];
    segments.push(Segment::Align);
    segments.extend(std::iter::repeat_n(Segment::Draft, z.len()));
    let mut positions: Vec<usize> = (0..x.len()).collect();
    positions.push(x.len());
    positions.extend(0..z.len());
    PackedInput {
        ids,
        segments,
        positions,
        source_len: x.len(),
        draft_len: z.len(),
    }
}

/// Square 0/1 mask over a packed sequence; `true` means "may attend".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    side: usize,
    data: Vec<bool>,
}

impl AttentionMask {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.side + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.data
            .chunks(self.side)
            .map(|r| r.iter().map(|&b| b as u8).collect())
            .collect()
    }
}

/// Source and draft blocks see only themselves; the ALIGN row and column
/// are fully open.
pub fn build_mask(m: usize, l: usize) -> AttentionMask {
    assert!(m >= 1, "source length must be at least 1");
    let side = m + 1 + l;
    let block = |i: usize| match i {
        i if i < m => Segment::Source,
        i if i == m => Segment::Align,
        _ => Segment::Draft,
    };
    let data = (0..side * side)
        .map(|k| {
            let (a, b) = (block(k / side), block(k % side));
            a == Segment::Align || b == Segment::Align || a == b
        })
        .collect();
    AttentionMask { side, data }
}

fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n <= k / n).collect()
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    scale: f64,
}

impl AttentionParams {
    pub fn new<R: Rng>(ps: &mut ParamSet, prefix: &str, d: usize, rng: &mut R) -> Self {
        let mut mk = |n: &str| ps.add(format!("{prefix}.{n}"), Tensor::glorot(d, d, rng));
        Self {
            wq: mk("wq"),
            wk: mk("wk"),
            wv: mk("wv"),
            wo: mk("wo"),
            scale: 1.0 / (d as f64).sqrt(),
        }
    }

    /// Scaled dot-product attention of `q_in` rows over `kv_in` rows.
    pub fn forward(
        &self,
        g: &mut Graph,
        q_in: Var,
        kv_in: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let wq = g.param(self.wq);
        let wk = g.param(self.wk);
        let wv = g.param(self.wv);
        let wo = g.param(self.wo);
        let q = g.matmul(q_in, wq);
        let k = g.matmul(kv_in, wk);
        let v = g.matmul(kv_in, wv);
        let kt = g.transpose(k);
        let s = g.matmul(q, kt);
        let s = g.scale(s, self.scale);
        let a = g.masked_softmax(s, mask)?;
        let o = g.matmul(a, v);
        Ok(g.matmul(o, wo))
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(ps: &mut ParamSet, prefix: &str, d: usize) -> Self {
        Self {
            gain: ps.add(
                format!("{prefix}.gain"),
                Tensor::matrix(1, d, vec![1.0; d]).expect("d > 0"),
            ),
            bias: ps.add(format!("{prefix}.bias"), Tensor::zeros(1, d)),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x, LN_EPS);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let n = g.mul_row(n, gain);
        g.add_row(n, bias)
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FeedForward {
    fn new<R: Rng>(ps: &mut ParamSet, prefix: &str, d: usize, rng: &mut R) -> Self {
        Self {
            w1: ps.add(format!("{prefix}.w1"), Tensor::glorot(d, 2 * d, rng)),
            b1: ps.add(format!("{prefix}.b1"), Tensor::zeros(1, 2 * d)),
            w2: ps.add(format!("{prefix}.w2"), Tensor::glorot(2 * d, d, rng)),
            b2: ps.add(format!("{prefix}.b2"), Tensor::zeros(1, d)),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w1 = g.param(self.w1);
        let b1 = g.param(self.b1);
        let w2 = g.param(self.w2);
        let b2 = g.param(self.b2);
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.relu(h);
        let o = g.matmul(h, w2);
        g.add_row(o, b2)
    }
}

/// Masked self-attention, then a position-wise feed-forward layer, each
/// with a residual connection and layer normalisation.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    attn: AttentionParams,
    ln1: Norm,
    ffn: FeedForward,
    ln2: Norm,
}

impl EncoderBlock {
    pub fn new<R: Rng>(ps: &mut ParamSet, prefix: &str, d: usize, rng: &mut R) -> Self {
        Self {
            attn: AttentionParams::new(ps, &format!("{prefix}.attn"), d, rng),
            ln1: Norm::new(ps, &format!("{prefix}.ln1"), d),
            ffn: FeedForward::new(ps, &format!("{prefix}.ffn"), d, rng),
            ln2: Norm::new(ps, &format!("{prefix}.ln2"), d),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: &AttentionMask) -> Result<Var> {
        if mask.side() != g.shape(x).0 {
            return Err(Error::Shape(format!(
                "mask side {} for {} positions",
                mask.side(),
                g.shape(x).0
            )));
        }
        let a = self.attn.forward(g, x, x, Some(mask.as_slice()))?;
        let h = g.add(x, a);
        let h = self.ln1.forward(g, h);
        let f = self.ffn.forward(g, h);
        let o = g.add(h, f);
        Ok(self.ln2.forward(g, o))
    }
}

/// Causal self-attention over the target prefix, unmasked cross-attention
/// to the packed encoder output, then a feed-forward layer.
#[derive(Debug, Clone)]
pub(crate) struct DecoderBlock {
    self_attn: AttentionParams,
    ln1: Norm,
    cross: AttentionParams,
    ln2: Norm,
    ffn: FeedForward,
    ln3: Norm,
}

impl DecoderBlock {
    pub(crate) fn new<R: Rng>(ps: &mut ParamSet, prefix: &str, d: usize, rng: &mut R) -> Self {
        Self {
            self_attn: AttentionParams::new(ps, &format!("{prefix}.self"), d, rng),
            ln1: Norm::new(ps, &format!("{prefix}.ln1"), d),
            cross: AttentionParams::new(ps, &format!("{prefix}.cross"), d, rng),
            ln2: Norm::new(ps, &format!("{prefix}.ln2"), d),
            ffn: FeedForward::new(ps, &format!("{prefix}.ffn"), d, rng),
            ln3: Norm::new(ps, &format!("{prefix}.ln3"), d),
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, y: Var, memory: Var) -> Var {
        let n = g.shape(y).0;
        let mask = causal_mask(n);
        let a = self
            .self_attn
            .forward(g, y, y, Some(&mask))
            .expect("causal mask keeps the diagonal");
        let h = g.add(y, a);
        let h = self.ln1.forward(g, h);
        let c = self
            .cross
            .forward(g, h, memory, None)
            .expect("unmasked attention");
        let h2 = g.add(h, c);
        let h2 = self.ln2.forward(g, h2);
        let f = self.ffn.forward(g, h2);
        let o = g.add(h2, f);
        self.ln3.forward(g, o)
    }
}

/// Token, position and segment embedding tables.
#[derive(Debug, Clone)]
pub(crate) struct Embeddings {
    tok: ParamId,
    pos: ParamId,
    seg: ParamId,
    max_positions: usize,
}

impl Embeddings {
    pub(crate) fn new<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        vocab: usize,
        max_positions: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            tok: ps.add(format!("{prefix}.tok"), Tensor::uniform(vocab, d, 0.1, rng)),
            pos: ps.add(
                format!("{prefix}.pos"),
                Tensor::uniform(max_positions, d, 0.1, rng),
            ),
            seg: ps.add(
                format!("{prefix}.seg"),
                Tensor::uniform(NUM_SEGMENTS, d, 0.1, rng),
            ),
            max_positions,
        }
    }

    pub(crate) fn embed(
        &self,
        g: &mut Graph,
        ids: &[usize],
        positions: &[usize],
        segments: &[Segment],
    ) -> Var {
        let tok = g.param(self.tok);
        let pos = g.param(self.pos);
        let seg = g.param(self.seg);
        let t = g.gather_rows(tok, ids);
        let clamped: Vec<usize> = positions
            .iter()
            .map(|&p| p.min(self.max_positions - 1))
            .collect();
        let p = g.gather_rows(pos, &clamped);
        let seg_ids: Vec<usize> = segments.iter().map(|&s| s as usize).collect();
        let s = g.gather_rows(seg, &seg_ids);
        let ts = g.add(t, p);
        g.add(ts, s)
    }

    pub(crate) fn embed_packed(&self, g: &mut Graph, packed: &PackedInput) -> Var {
        self.embed(g, &packed.ids, &packed.positions, &packed.segments)
    }
}

/// Packed encoder, ALIGN scorer and target-side decoder.
#[derive(Debug, Clone)]
pub(crate) struct TransformerNet {
    emb: Embeddings,
    enc: EncoderBlock,
    /// Separate evaluator embeddings and block when sharing is disabled.
    ev: Option<(Embeddings, EncoderBlock)>,
    v_e: ParamId,
    dec: DecoderBlock,
}

impl TransformerNet {
    pub(crate) fn new<R: Rng>(
        ps: &mut ParamSet,
        vocab: usize,
        d: usize,
        max_positions: usize,
        share: bool,
        rng: &mut R,
    ) -> Self {
        let emb = Embeddings::new(ps, "rw.emb", vocab, max_positions, d, rng);
        let enc = EncoderBlock::new(ps, "rw.enc", d, rng);
        let ev = (!share).then(|| {
            (
                Embeddings::new(ps, "ev.emb", vocab, max_positions, d, rng),
                EncoderBlock::new(ps, "ev.enc", d, rng),
            )
        });
        let v_e = ps.add("ev.v_e", Tensor::glorot(d, 1, rng));
        let dec = DecoderBlock::new(ps, "rw.dec", d, rng);
        Self {
            emb,
            enc,
            ev,
            v_e,
            dec,
        }
    }

    pub(crate) fn encode(&self, g: &mut Graph, packed: &PackedInput) -> Var {
        let x = self.emb.embed_packed(g, packed);
        let mask = build_mask(packed.source_len, packed.draft_len);
        self.enc
            .forward(g, x, &mask)
            .expect("mask built for this input")
    }

    /// `v_E . h_ALIGN`, reusing the rewriter encoding when shared.
    pub(crate) fn score(&self, g: &mut Graph, packed: &PackedInput, encoded: Var) -> Var {
        let out = match &self.ev {
            None => encoded,
            Some((emb, enc)) => {
                let x = emb.embed_packed(g, packed);
                let mask = build_mask(packed.source_len, packed.draft_len);
                enc.forward(g, x, &mask).expect("mask built for this input")
            }
        };
        let h = g.row(out, packed.align_index());
        let v = g.param(self.v_e);
        g.matmul(h, v)
    }

    /// Decoder states for every position of a target prefix.
    pub(crate) fn decode(&self, g: &mut Graph, memory: Var, embed_ids: &[usize]) -> Var {
        let positions: Vec<usize> = (0..embed_ids.len()).collect();
        let segments = vec![Segment::Target; embed_ids.len()];
        let y = self.emb.embed(g, embed_ids, &positions, &segments);
        self.dec.forward(g, y, memory)
    }
}
