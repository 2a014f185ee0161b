//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of the backward rules it verifies.

use super::{Bindings, ParamStore, Tape, Var};
use crate::error::Result;

/// Denominator floor for [`relative_error`]; gradients smaller than this are
/// compared absolutely.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Entries whose `±h` perturbation moved a ReLU input across zero. The
    /// difference quotient then spans a kink and says nothing about the
    /// derivative, so these are left out of `checked`.
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

/// Compare the tape gradient of `loss_fn` against central differences with
/// step `h` for every trainable scalar in `store`.
///
/// `loss_fn` must be deterministic: any randomness (dropout) has to be
/// reseeded inside the closure.
pub fn check_gradients<F>(store: &mut ParamStore, h: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &Bindings) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let bound = tape.bind(store);
    let loss = loss_fn(&mut tape, &bound)?;
    let pattern = tape.relu_pattern();
    tape.backward(loss, store)?;

    let mut eval = |store: &ParamStore| -> Result<(f64, bool)> {
        let mut tape = Tape::new();
        let bound = tape.bind(store);
        let loss = loss_fn(&mut tape, &bound)?;
        Ok((tape.value(loss).item(), tape.relu_pattern() == pattern))
    };

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        let analytic = store
            .get(id)
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; store.value(id).len()]);
        for (k, &a) in analytic.iter().enumerate() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let (up, same_up) = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig - h;
            let (down, same_down) = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig;
            if !(same_up && same_down) {
                report.skipped_kinks += 1;
                continue;
            }

            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.get(id).name.clone(), k, a, numeric));
            }
        }
    }
    store.zero_grad();
    Ok(report)
}
