//! Central finite-difference oracle for analytic gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Objective value plus, when requested, analytic gradients of the trainable set.
#[derive(Debug)]
pub struct Evaluation {
    pub value: f64,
    pub grads: Option<BTreeMap<String, Tensor>>,
    /// Fingerprint of the active side of every kink in the objective, when it
    /// has any. Two points with equal signatures lie on one smooth piece.
    pub kinks: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    /// Entries whose `±h` window crossed a kink. Their numeric estimate is a
    /// secant across the kink, not a derivative.
    pub kink_crossings: usize,
    pub first_crossing: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// A central difference at `h = 1e-5` carries about 1e-11 of rounding noise
/// in fp64, so entries smaller than this are judged by absolute error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares analytic gradients with `(f(θ+h) - f(θ-h)) / 2h` for every scalar
/// of every parameter that `f` returns a gradient for.
///
/// `f(params, want_grad)` must be deterministic; the base point is evaluated
/// twice and any bitwise difference is reported as an oracle error.
pub fn finite_diff_check<F>(f: F, params: &ParamStore, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, bool) -> Result<Evaluation>,
{
    run(f, params, step, false).map(|r| r.expect("only a stopping run returns early"))
}

/// As [`finite_diff_check`], but gives up with `None` at the first entry whose
/// window crosses a kink, so callers can move to a smoother base point.
pub fn finite_diff_check_smooth<F>(f: F, params: &ParamStore, step: f64) -> Result<Option<GradCheckReport>>
where
    F: Fn(&ParamStore, bool) -> Result<Evaluation>,
{
    run(f, params, step, true)
}

fn run<F>(f: F, params: &ParamStore, step: f64, stop_at_kink: bool) -> Result<Option<GradCheckReport>>
where
    F: Fn(&ParamStore, bool) -> Result<Evaluation>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Oracle(format!("step must be positive, got {step}")));
    }
    let base = f(params, true)?;
    let again = f(params, false)?;
    if base.value.to_bits() != again.value.to_bits() || base.kinks != again.kinks {
        return Err(Error::Oracle(format!(
            "objective is not deterministic: {} then {}",
            base.value, again.value
        )));
    }
    let grads = base
        .grads
        .ok_or_else(|| Error::Oracle("objective returned no gradients".into()))?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
        kink_crossings: 0,
        first_crossing: None,
    };
    let mut work = params.clone();
    for (name, analytic) in &grads {
        let original = params.get(name)?.clone();
        if original.shape() != analytic.shape() {
            return Err(Error::Dimension {
                op: "finite_diff_check",
                left: original.shape().to_vec(),
                right: analytic.shape().to_vec(),
            });
        }
        for k in 0..original.numel() {
            let theta = original.data()[k];
            work.get_mut(name)?.data_mut()[k] = theta + step;
            let plus = f(&work, false)?;
            work.get_mut(name)?.data_mut()[k] = theta - step;
            let minus = f(&work, false)?;
            work.get_mut(name)?.data_mut()[k] = theta;

            if plus.kinks != base.kinks || minus.kinks != base.kinks {
                if stop_at_kink {
                    return Ok(None);
                }
                report.kink_crossings += 1;
                report.first_crossing.get_or_insert_with(|| (name.clone(), k));
            }
            let numeric = (plus.value - minus.value) / (2.0 * step);
            let a = analytic.data()[k];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), k));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(Some(report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::params::Bound;
    use rand::SeedableRng;
    use std::cell::Cell;
    use std::collections::BTreeSet;

    fn quadratic(params: &ParamStore, want: bool) -> Result<Evaluation> {
        let trainable: BTreeSet<String> = params.names().map(String::from).collect();
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, params, &trainable);
        let w = b.get("w")?;
        let a = g.constant(Tensor::from_rows(&[&[2.0, 0.5], &[0.5, 1.0]]));
        let aw = g.matmul(a, w)?;
        let q = g.mul(w, aw)?;
        let loss = g.sum(q)?;
        let value = g.value(loss).data()[0];
        let grads = if want { Some(g.backward(loss)?.into_named()) } else { None };
        Ok(Evaluation { value, grads, kinks: None })
    }

    #[test]
    fn quadratic_is_exact() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::column(&[0.7, -1.3]));
        let r = finite_diff_check(quadratic, &p, 1e-5).unwrap();
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn softmax_cross_entropy_matches() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamStore::new();
        p.insert("z", Tensor::uniform(&[5, 3], -2.0, 2.0, &mut rng));
        let f = |params: &ParamStore, want: bool| -> Result<Evaluation> {
            let trainable: BTreeSet<String> = ["z".to_string()].into();
            let mut g = Graph::new();
            let b = Bound::bind(&mut g, params, &trainable);
            let loss = g.cross_entropy(b.get("z")?, &[0, 4, 2])?;
            let value = g.value(loss).data()[0];
            let grads = if want { Some(g.backward(loss)?.into_named()) } else { None };
            Ok(Evaluation { value, grads, kinks: None })
        };
        let r = finite_diff_check(f, &p, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn detects_nondeterminism() {
        let calls = Cell::new(0u32);
        let f = |_: &ParamStore, _: bool| -> Result<Evaluation> {
            calls.set(calls.get() + 1);
            Ok(Evaluation {
                value: calls.get() as f64,
                grads: Some(BTreeMap::new()),
                kinks: None,
            })
        };
        let err = finite_diff_check(f, &ParamStore::new(), 1e-5).unwrap_err();
        assert!(matches!(err, Error::Oracle(_)));
    }

    #[test]
    fn relu_kink_is_flagged() {
        let f = |params: &ParamStore, want: bool| -> Result<Evaluation> {
            let trainable: BTreeSet<String> = ["x".to_string()].into();
            let mut g = Graph::new();
            let b = Bound::bind(&mut g, params, &trainable);
            let r = g.relu(b.get("x")?)?;
            let loss = g.sum(r)?;
            let value = g.value(loss).data()[0];
            let kinks = Some(g.kink_signature());
            let grads = if want { Some(g.backward(loss)?.into_named()) } else { None };
            Ok(Evaluation { value, grads, kinks })
        };
        let mut p = ParamStore::new();
        p.insert("x", Tensor::column(&[0.5, 3e-6, -1.0]));
        let r = finite_diff_check(f, &p, 1e-5).unwrap();
        assert_eq!(r.kink_crossings, 1);
        assert_eq!(r.first_crossing, Some(("x".to_string(), 1)));
        assert!(finite_diff_check_smooth(f, &p, 1e-5).unwrap().is_none());
        p.get_mut("x").unwrap().data_mut()[1] = 0.25;
        let r = finite_diff_check_smooth(f, &p, 1e-5).unwrap().unwrap();
        assert_eq!(r.kink_crossings, 0);
        assert!(r.max_rel_error < 1e-10);
    }

    #[test]
    fn rejects_bad_step() {
        assert!(finite_diff_check(quadratic, &ParamStore::new(), 0.0).is_err());
    }
}
