//! One-hop edge attention and its multi-hop diffusion.

use crate::error::{Error, Result};
use crate::numerics::{Session, Var, LEAKY_SLOPE};

use super::power::power_series_on_tape;

/// Parameter paths for one attention head.
#[derive(Clone, Debug)]
pub struct HeadKeys {
    /// Source projection `W_i`, `d_h x d_h`.
    pub w_src: String,
    /// Target projection `W_j`, `d_h x d_h`.
    pub w_dst: String,
    /// First half of the attention vector, `d_h x 1`.
    pub a_src: String,
    /// Second half of the attention vector, `d_h x 1`.
    pub a_dst: String,
}

impl HeadKeys {
    pub fn new(prefix: &str) -> Self {
        Self {
            w_src: format!("{prefix}.w_src"),
            w_dst: format!("{prefix}.w_dst"),
            a_src: format!("{prefix}.a_src"),
            a_dst: format!("{prefix}.a_dst"),
        }
    }
}

/// Row-stochastic attention over the graph's relations.
///
/// Scores are `LeakyReLU(aᵀ tanh(W_i h_i ‖ W_j h_j))`. Because `tanh` acts
/// elementwise on the concatenation, the score splits into a source term
/// and a target term, so all `N²` pairs come from two `N x 1` columns.
/// Entries off the adjacency are masked to exactly zero.
pub fn edge_attention(s: &mut Session<'_>, h: Var, adjacency: &crate::numerics::DenseMatrix, keys: &HeadKeys) -> Result<Var> {
    let n = s.value(h).rows();
    if adjacency.shape() != (n, n) {
        return Err(Error::Shape(format!(
            "adjacency {:?} for {n} node rows",
            adjacency.shape()
        )));
    }
    let w_src = s.param(&keys.w_src)?;
    let w_dst = s.param(&keys.w_dst)?;
    let a_src = s.param(&keys.a_src)?;
    let a_dst = s.param(&keys.a_dst)?;
    let t = &mut s.tape;
    let src = t.matmul(h, w_src)?;
    let src = t.tanh(src);
    let src = t.matmul(src, a_src)?;
    let dst = t.matmul(h, w_dst)?;
    let dst = t.tanh(dst);
    let dst = t.matmul(dst, a_dst)?;
    let dst = t.transpose(dst);
    let scores = t.outer_sum(src, dst)?;
    let scores = t.leaky_relu(scores, LEAKY_SLOPE);
    t.row_softmax(scores, Some(adjacency))
}

/// `Σ_{k=0..K} δ_k Aᵏ H` with `decay` a `1 x (K+1)` node of `δ_k` values.
pub fn multi_hop_diffuse(s: &mut Session<'_>, attention: Var, h: Var, decay: Var, hops: usize) -> Result<Var> {
    if s.value(decay).shape() != (1, hops + 1) {
        return Err(Error::Shape(format!(
            "decay {:?} for K = {hops}",
            s.value(decay).shape()
        )));
    }
    let t = &mut s.tape;
    let mut power = h;
    let d0 = t.col_slice(decay, 0, 1)?;
    let mut out = t.scale_by(h, d0)?;
    for k in 1..=hops {
        power = t.matmul(attention, power)?;
        let dk = t.col_slice(decay, k, 1)?;
        let term = t.scale_by(power, dk)?;
        out = t.add(out, term)?;
    }
    Ok(out)
}

/// Accelerated diffusion: `δ_0 H + Σ_{i=1..n} (θA)ⁱ H` via the power
/// recurrence. Hop weights beyond 0 become the geometric `θⁱ`.
pub fn power_diffuse(s: &mut Session<'_>, attention: Var, h: Var, decay: Var, theta: f64, iterations: usize) -> Result<Var> {
    let t = &mut s.tape;
    let q = t.scale(attention, theta);
    let series = power_series_on_tape(t, q, h, iterations)?;
    let d0 = t.col_slice(decay, 0, 1)?;
    let base = t.scale_by(h, d0)?;
    t.add(base, series)
}
