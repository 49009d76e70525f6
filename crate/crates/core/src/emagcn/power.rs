//! Truncated power series `Σ_{i=1..n} Qⁱ X`, the iterative stand-in for
//! `(I - Q)⁻¹ Q X`.

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, Tape, Var};

/// How the recurrence applies `Q`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerVariant {
    /// `H(t) = Q H(t-1) + H(1)`
    #[default]
    Plain,
    /// `H(t) = Qᵀ H(t-1) + H(1)`, with `H(1) = Qᵀ X`
    Transposed,
}

/// Default contraction factor applied to a stochastic matrix before
/// iterating.
pub const DEFAULT_THETA: f64 = 0.9;

/// `D⁻¹ A`: each row divided by its sum. Zero rows stay zero.
pub fn row_normalize(a: &DenseMatrix) -> DenseMatrix {
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let total: f64 = row.iter().sum();
        if total != 0.0 {
            row.iter_mut().for_each(|v| *v /= total);
        }
    }
    out
}

/// Runs `n` steps of `H(t) = Q H(t-1) + H(1)` with `H(1) = Q X`.
///
/// Fails when the increments `Qᵗ X` stop shrinking, which is what happens
/// once the spectral radius of `Q` reaches 1.
pub fn power_iterate(q: &DenseMatrix, x: &DenseMatrix, n: usize) -> Result<DenseMatrix> {
    power_iterate_with(q, x, n, PowerVariant::Plain)
}

pub fn power_iterate_with(q: &DenseMatrix, x: &DenseMatrix, n: usize, variant: PowerVariant) -> Result<DenseMatrix> {
    if q.rows() != q.cols() {
        return Err(Error::Shape(format!("power iteration needs a square matrix, got {:?}", q.shape())));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("power iteration needs n >= 1".into()));
    }
    let q = match variant {
        PowerVariant::Plain => q.clone(),
        PowerVariant::Transposed => q.transpose(),
    };
    let first = q.matmul(x)?;
    let first_norm = first.max_abs();
    let mut term = first.clone();
    let mut h = first;
    let mut ratio = 0.0;
    for t in 2..=n {
        let prev = term.max_abs();
        term = q.matmul(&term)?;
        let norm = term.max_abs();
        if !norm.is_finite() || (first_norm > 0.0 && norm > first_norm * 1e6) {
            return Err(Error::Divergence { iterations: t });
        }
        ratio = if prev > 0.0 { norm / prev } else { 0.0 };
        h.add_assign(&term)?;
    }
    // the ratio of the last two increments tends to the spectral radius
    // seen from X
    if ratio >= 1.0 - 1e-6 {
        return Err(Error::Divergence { iterations: n });
    }
    Ok(h)
}

/// The same recurrence recorded on a tape so it can be differentiated.
pub fn power_series_on_tape(tape: &mut Tape, q: Var, x: Var, n: usize) -> Result<Var> {
    if n == 0 {
        return Err(Error::InvalidArgument("power iteration needs n >= 1".into()));
    }
    let first = tape.matmul(q, x)?;
    let mut h = first;
    for _ in 2..=n {
        let qh = tape.matmul(q, h)?;
        h = tape.add(qh, first)?;
    }
    Ok(h)
}
