//! Saliency-guided textual attention: a sigmoid-gated fusion of visual and
//! textual context drives a soft attention over the word features.

use crate::config::ModelConfig;
use crate::error::{Result, SanError};
use crate::layers::{linear, linear_rows};
use crate::params::{Initializer, ParamStore};
use crate::tensor::{Graph, Var};

pub const PREFIX: &str = "sta.";

pub fn init_params(cfg: &ModelConfig, init: &mut Initializer<'_>) {
    let k = cfg.joint_dim;
    init.linear("sta.u_v", k, k);
    init.linear("sta.u_t", k, k);
    init.linear("sta.w_t0", k, k);
    init.linear("sta.w_t1", k, k);
    init.matrix("sta.w_t2", 1, k);
}

/// `m_f = σ(U_v v + U_t t^(g))`.
pub fn gated_fusion(g: &mut Graph, ps: &ParamStore, v: Var, t_global: Var) -> Result<Var> {
    if g.shape(v) != g.shape(t_global) {
        return Err(SanError::shape("gated_fusion", g.shape(v), g.shape(t_global)));
    }
    let vh = linear(g, ps, "sta.u_v", v)?;
    let th = linear(g, ps, "sta.u_t", t_global)?;
    let s = g.add(vh, th)?;
    Ok(g.sigmoid(s))
}

/// Image-independent half of the attention hidden state,
/// `tanh(W_t1 t_j)` for every word, `[L×k]`. Computed once per sentence and
/// reused for every image it is paired with.
pub fn word_keys(g: &mut Graph, ps: &ParamStore, words: Var) -> Result<Var> {
    let proj = linear_rows(g, ps, "sta.w_t1", words)?;
    Ok(g.tanh(proj))
}

/// Attention weights `a_t` `[L]` and the attended vector `t^(s)` `[k]`.
pub struct Attention {
    pub weights: Var,
    pub attended: Var,
}

/// `h_j = tanh(W_t0 m_f) ⊙ tanh(W_t1 t_j)`, `a = softmax_j(W_t2 h_j)`,
/// `t^(s) = Σ_j a_j t_j`.
pub fn textual_attention(g: &mut Graph, ps: &ParamStore, m_f: Var, words: Var, keys: Var) -> Result<Attention> {
    let [l, k] = *g.shape(words) else {
        return Err(SanError::Config("word features must be an [L×k] matrix".into()));
    };
    if g.shape(keys) != [l, k] {
        return Err(SanError::shape("textual_attention", g.shape(words), g.shape(keys)));
    }
    let q = linear(g, ps, "sta.w_t0", m_f)?;
    let gate = g.tanh(q);
    let hidden = g.mul(keys, gate)?;
    let w = g.param(ps, "sta.w_t2")?;
    let wt = g.transpose(w)?;
    let scores = g.matmul(hidden, wt)?;
    let scores = g.reshape(scores, &[l])?;
    let weights = g.softmax(scores, 0)?;
    let wt = g.transpose(words)?;
    let attended = g.matvec(wt, weights)?;
    Ok(Attention { weights, attended })
}

/// `t = (t^(g) + t^(s)) / 2`.
pub fn fuse_textual(g: &mut Graph, t_global: Var, t_salient: Var) -> Result<Var> {
    g.average(t_global, t_salient)
}
