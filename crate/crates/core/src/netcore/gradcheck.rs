//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::netcore::{ParamTensor, Tensor2};

/// Anything that can hand out its parameters by id.
pub trait ParamStore {
    fn param(&self, id: &str) -> Option<&ParamTensor>;
    fn param_mut(&mut self, id: &str) -> Option<&mut ParamTensor>;
}

impl ParamStore for Vec<ParamTensor> {
    fn param(&self, id: &str) -> Option<&ParamTensor> {
        self.iter().find(|p| p.id == id)
    }

    fn param_mut(&mut self, id: &str) -> Option<&mut ParamTensor> {
        self.iter_mut().find(|p| p.id == id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter id and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the analytic gradients returned by `loss_fn` with central
/// differences `(L(p + h) - L(p - h)) / 2h`, entry by entry, for every
/// parameter present in the analytic gradient map.
///
/// `loss_fn` must be deterministic. The store is restored exactly after each probe.
pub fn grad_check<S, F>(store: &mut S, loss_fn: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    S: ParamStore,
    F: Fn(&S) -> Result<(f64, BTreeMap<String, Tensor2>)>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let (_, analytic) = loss_fn(store)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
        tol,
        passed: true,
    };

    for (id, grad) in &analytic {
        let len = store
            .param(id)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {id}")))?
            .value
            .len();
        if grad.len() != len {
            return Err(Error::Integrity(format!(
                "gradient of {id} has {} entries, parameter has {len}",
                grad.len()
            )));
        }
        for idx in 0..len {
            let original = store.param(id).expect("checked above").value.data()[idx];
            let probe = |value: f64, store: &mut S| -> Result<f64> {
                store.param_mut(id).expect("checked above").value.data_mut()[idx] = value;
                let (loss, _) = loss_fn(store)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss while probing {id}[{idx}]"
                    )));
                }
                Ok(loss)
            };
            let plus = probe(original + h, store);
            let minus = probe(original - h, store);
            store.param_mut(id).expect("checked above").value.data_mut()[idx] = original;
            let numeric = (plus? - minus?) / (2.0 * h);
            let err = rel_error(grad.data()[idx], numeric);
            report.entries_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((id.clone(), idx));
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_of_squares(store: &Vec<ParamTensor>) -> Result<(f64, BTreeMap<String, Tensor2>)> {
        let p = &store[0];
        let value = p.value.data().iter().map(|v| v * v).sum();
        let grad = p.value.map(|v| 2.0 * v);
        Ok((value, BTreeMap::from([(p.id.clone(), grad)])))
    }

    #[test]
    fn quadratic_passes() {
        let value = Tensor2::from_rows(&[[0.3, -1.7], [2.2, 0.05]]).unwrap();
        let mut store = vec![ParamTensor::new("q", value.clone())];
        let report = grad_check(&mut store, sum_of_squares, 1e-5, 1e-8).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.entries_checked, 4);
        assert!(report.max_rel_error < 1e-8);
        assert_eq!(store[0].value, value, "store restored");
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let mut store = vec![ParamTensor::new("q", Tensor2::from_rows(&[[1.0, 2.0]]).unwrap())];
        let report = grad_check(
            &mut store,
            |s| {
                let (v, mut g) = sum_of_squares(s)?;
                g.get_mut("q").unwrap().data_mut()[1] += 0.5;
                Ok((v, g))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst, Some(("q".to_string(), 1)));
    }

    #[test]
    fn non_finite_probe_names_parameter() {
        let mut store = vec![ParamTensor::new("p", Tensor2::from_rows(&[[0.0, 1.0]]).unwrap())];
        let err = grad_check(
            &mut store,
            |s| {
                let v = s[0].value.data();
                let loss = if v[0] != 0.0 { f64::NAN } else { v[1] };
                Ok((loss, BTreeMap::from([("p".to_string(), Tensor2::from_rows(&[[0.0, 1.0]]).unwrap())])))
            },
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(err.to_string().contains("p[0]"), "{err}");
    }
}
