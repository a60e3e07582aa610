use alloc::string::String;

use super::{Gradients, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `|a - n| / max(|a|, |n|, 1e-8)`, maximized over all parameter entries.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// Compares tape gradients of the scalar built by `f` against fourth-order
/// central differences with step `h` on every parameter entry. Parameter values are
/// restored before returning.
pub fn grad_check<F>(f: F, store: &mut ParamStore, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::Tape("gradient check needs a scalar objective".into()));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let root = f(&mut tape, store)?;
    let mut grads = Gradients::for_store(store);
    tape.backward(root, 1.0, &mut grads)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };
    let ids: alloc::vec::Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).value.numel();
        for k in 0..n {
            let original = store.get(id).value.data()[k];
            let mut at = |offset: f64| {
                store.get_mut(id).value.data_mut()[k] = original + offset;
                eval(store)
            };
            let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
            store.get_mut(id).value.data_mut()[k] = original;
            let numeric = (8.0 * (p1? - m1?) - (p2? - m2?)) / (12.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
            let abs = (analytic - numeric).abs();
            let rel = abs / analytic.abs().max(numeric.abs()).max(1e-8);
            report.entries_checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = store.get(id).name.clone();
                report.worst_index = k;
            }
        }
    }
    Ok(report)
}
