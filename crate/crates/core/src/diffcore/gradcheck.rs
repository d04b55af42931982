use std::collections::BTreeMap;

use super::{ParameterStore, Tensor};

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-2;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose +/- step changed some relu's active set.
    pub skipped_kinks: usize,
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        if other.worst.is_some() && (self.worst.is_none() || other.max_rel_err > self.max_rel_err) {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }
}

/// Central differences of `f` against `analytic` for every scalar of every
/// parameter named in `analytic`. `f` returns the loss and the relu sign
/// pattern; steps that flip a sign are skipped.
pub fn check_store_gradients<E, F>(
    store: &ParameterStore,
    analytic: &BTreeMap<String, Tensor>,
    h: f64,
    mut f: F,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&ParameterStore) -> Result<(f64, Vec<bool>), E>,
{
    let (_, base_signs) = f(store)?;
    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    for (name, grad) in analytic {
        for i in 0..grad.len() {
            let orig = probe.value(name).expect("analytic names come from the store").data()[i];
            probe.get_mut(name).unwrap().value.data_mut()[i] = orig + h;
            let (up, s_up) = f(&probe)?;
            probe.get_mut(name).unwrap().value.data_mut()[i] = orig - h;
            let (down, s_down) = f(&probe)?;
            probe.get_mut(name).unwrap().value.data_mut()[i] = orig;
            if s_up != base_signs || s_down != base_signs {
                report.skipped_kinks += 1;
                continue;
            }
            let err = relative_error(grad.data()[i], (up - down) / (2.0 * h));
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
