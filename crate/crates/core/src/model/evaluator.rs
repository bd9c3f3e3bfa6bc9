//! Co-attention quality estimator and its hinge loss.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamSet, Tensor, Var};

/// Intermediate values of co-attention between source rows `h` and draft
/// rows `p`.
#[derive(Debug, Clone, Copy)]
pub struct CoAttention {
    /// `alpha[i][j] = h_i W_E p_j`.
    pub alpha: Var,
    /// Softmax of each `alpha` row over draft positions.
    pub row_weights: Var,
    /// Softmax of each `alpha` column over source positions, stored as
    /// `L x M`.
    pub col_weights: Var,
    pub h_tilde: Var,
    pub p_tilde: Var,
}

pub fn co_attention(g: &mut Graph, w_e: Var, h: Var, p: Var) -> CoAttention {
    let m = g.shape(h).0;
    let l = g.shape(p).0;
    co_attention_padded(g, w_e, h, p, m, l).expect("unpadded co-attention has no masked rows")
}

/// Co-attention where only the first `m` rows of `h` and the first `l`
/// rows of `p` are real; the remainder is padding and receives no weight.
pub fn co_attention_padded(
    g: &mut Graph,
    w_e: Var,
    h: Var,
    p: Var,
    m: usize,
    l: usize,
) -> Result<CoAttention> {
    let (mp, _) = g.shape(h);
    let (lp, _) = g.shape(p);
    let hw = g.matmul(h, w_e);
    let pt = g.transpose(p);
    let alpha = g.matmul(hw, pt);
    let row_mask: Vec<bool> = (0..mp * lp).map(|k| k % lp < l).collect();
    let row_weights = g.masked_softmax(alpha, Some(&row_mask))?;
    let h_tilde = g.matmul(row_weights, p);
    let alpha_t = g.transpose(alpha);
    let col_mask: Vec<bool> = (0..lp * mp).map(|k| k % mp < m).collect();
    let col_weights = g.masked_softmax(alpha_t, Some(&col_mask))?;
    let p_tilde = g.matmul(col_weights, h);
    let h_tilde = if m == mp {
        h_tilde
    } else {
        g.slice_rows(h_tilde, 0, m)
    };
    let p_tilde = if l == lp {
        p_tilde
    } else {
        g.slice_rows(p_tilde, 0, l)
    };
    Ok(CoAttention {
        alpha,
        row_weights,
        col_weights,
        h_tilde,
        p_tilde,
    })
}

/// `q = v_E . (mean(h_tilde) ⊕ mean(p_tilde))`.
pub fn pooled_score(g: &mut Graph, v_e: Var, h_tilde: Var, p_tilde: Var) -> Var {
    let mh = g.mean_rows(h_tilde);
    let mp = g.mean_rows(p_tilde);
    let feat = g.concat_cols(&[mh, mp]);
    g.matmul(feat, v_e)
}

/// `max(0, 1 - q_star + q_k)`.
pub fn hinge_loss(g: &mut Graph, q_star: Var, q_k: Var) -> Var {
    let d = g.sub(q_k, q_star);
    let d = g.add_scalar(d, 1.0);
    g.relu(d)
}

#[derive(Debug, Clone)]
pub(crate) struct EvaluatorHead {
    pub(crate) w_e: ParamId,
    pub(crate) v_e: ParamId,
}

impl EvaluatorHead {
    pub(crate) fn new<R: Rng>(ps: &mut ParamSet, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_e: ps.add("ev.w_e", Tensor::glorot(hidden, hidden, rng)),
            v_e: ps.add("ev.v_e", Tensor::glorot(2 * hidden, 1, rng)),
        }
    }

    pub(crate) fn score(&self, g: &mut Graph, h: Var, p: Var) -> Var {
        let w = g.param(self.w_e);
        let v = g.param(self.v_e);
        let co = co_attention(g, w, h, p);
        pooled_score(g, v, co.h_tilde, co.p_tilde)
    }
}
