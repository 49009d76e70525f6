//! Central finite-difference verification of tape gradients.

use super::param::{ParamStore, Session};
use super::tape::Var;
use crate::error::{Error, Result};

/// Outcome of [`gradient_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - fd| / max(1, |fd|)` over all checked entries.
    pub max_rel_error: f64,
    /// Parameter path and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `h`, over every trainable entry of `store`.
pub fn gradient_check<F>(store: &mut ParamStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<'_>) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::InvalidArgument(format!("finite-difference step {h} outside [1e-6, 1e-3]")));
    }
    let analytic: Vec<(String, Vec<f64>)> = {
        let mut s = Session::new(store);
        let loss = f(&mut s)?;
        let grads = s.backward(loss)?;
        store
            .iter()
            .filter(|(_, p)| p.requires_grad)
            .map(|(k, p)| {
                let g = grads
                    .iter()
                    .find(|(gk, _)| gk == k)
                    .map(|(_, g)| g.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; p.value.len()]);
                (k.clone(), g)
            })
            .collect()
    };

    let eval = |store: &ParamStore, key: &str, idx: usize| -> Result<f64> {
        let mut s = Session::new(store);
        let loss = f(&mut s)?;
        let v = s.scalar(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("objective while perturbing {key}[{idx}]"),
            });
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (key, grad) in analytic {
        for (idx, &g) in grad.iter().enumerate() {
            let original = store.get(&key)?.value.data()[idx];
            store.get_mut(&key)?.value.data_mut()[idx] = original + h;
            let plus = eval(store, &key, idx);
            store.get_mut(&key)?.value.data_mut()[idx] = original - h;
            let minus = eval(store, &key, idx);
            store.get_mut(&key)?.value.data_mut()[idx] = original;
            let fd = (plus? - minus?) / (2.0 * h);
            let err = (g - fd).abs() / fd.abs().max(1.0);
            if !err.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of {key}[{idx}]"),
                });
            }
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((key.clone(), idx));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{DenseMatrix, Parameter};

    #[test]
    fn quadratic_matches_differences() {
        let mut store = ParamStore::new();
        store.insert("x", Parameter::new(DenseMatrix::row_vector(&[1.0, 2.0])));
        let objective = |s: &mut Session<'_>| {
            let x = s.param("x")?;
            let sq = s.tape.square(x);
            Ok(s.tape.sum(sq))
        };
        {
            let mut s = Session::new(&store);
            let loss = objective(&mut s).unwrap();
            let grads = s.backward(loss).unwrap();
            assert_eq!(grads[0].1.data(), &[2.0, 4.0]);
        }
        let report = gradient_check(&mut store, 1e-4, objective).unwrap();
        assert!(report.max_rel_error < 1e-6);
        assert_eq!(report.checked, 2);
        // perturbations are undone
        assert_eq!(store.value("x").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let mut store = ParamStore::new();
        let err = gradient_check(&mut store, 1e-2, |s| Ok(s.constant(DenseMatrix::scalar(0.0)))).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn non_finite_objective_names_coordinate() {
        let mut store = ParamStore::new();
        store.insert("x", Parameter::new(DenseMatrix::row_vector(&[0.0, 1.0])));
        // ln(x) is fine at 1 but blows up around 0
        let err = gradient_check(&mut store, 1e-4, |s| {
            let x = s.param("x")?;
            let y = s.tape.ln(x);
            Ok(s.tape.sum(y))
        })
        .unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut store = ParamStore::new();
        store.insert("x", Parameter::new(DenseMatrix::row_vector(&[0.3])));
        let report = gradient_check(&mut store, 1e-4, |s| {
            let x = s.param("x")?;
            let c = s.constant(DenseMatrix::row_vector(&[0.3]));
            // reading the value back as a constant drops part of the derivative
            let frozen = s.constant(s.value(x).clone());
            let y = s.tape.mul(frozen, c)?;
            let y = s.tape.add(y, x)?;
            Ok(s.tape.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_error > 0.1);
        assert_eq!(report.worst, Some(("x".to_string(), 0)));
    }
}
