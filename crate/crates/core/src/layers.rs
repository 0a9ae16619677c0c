//! Small graph-building helpers shared by the model components.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{Graph, Var};

/// `W x + b` for a vector `x`, parameters `{name}.w` / `{name}.b`.
pub fn linear(g: &mut Graph, ps: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(ps, &format!("{name}.w"))?;
    let b = g.param(ps, &format!("{name}.b"))?;
    let y = g.matvec(w, x)?;
    g.add(y, b)
}

/// Row-wise `X Wᵀ + b` for a `[L×in]` matrix.
pub fn linear_rows(g: &mut Graph, ps: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(ps, &format!("{name}.w"))?;
    let b = g.param(ps, &format!("{name}.b"))?;
    let wt = g.transpose(w)?;
    let y = g.matmul(x, wt)?;
    g.add(y, b)
}

/// Size-preserving 3×3 convolution with bias.
pub fn conv3x3(g: &mut Graph, ps: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(ps, &format!("{name}.w"))?;
    let b = g.param(ps, &format!("{name}.b"))?;
    g.conv2d(x, w, Some(b), 1, 1)
}

/// 3×3 convolution followed by per-channel PReLU (`{name}.prelu`).
pub fn conv3x3_prelu(g: &mut Graph, ps: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let y = conv3x3(g, ps, name, x)?;
    let a = g.param(ps, &format!("{name}.prelu"))?;
    g.prelu(y, a)
}
