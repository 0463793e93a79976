//! Central finite-difference gradient checking.

use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares `analytic` against `(f(θ+h) − f(θ−h)) / 2h` for every entry of
/// every parameter, where `f` re-evaluates the loss from the store.
///
/// The relative error of one parameter tensor is
/// `‖a − n‖ / max(‖a‖, ‖n‖, floor)`; `floor` keeps exactly-zero gradients
/// (e.g. unused parameters) from producing 0/0.
pub fn check_gradients(
    store: &ParamStore,
    analytic: &[Tensor],
    step: f64,
    floor: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> GradCheckReport {
    let mut probe = store.clone();
    let mut entries = Vec::new();
    for (id, name, value) in store.iter() {
        let mut numeric = vec![0.0; value.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = value.data()[i];
            probe.value_mut(id).data_mut()[i] = orig + step;
            let up = loss(&probe);
            probe.value_mut(id).data_mut()[i] = orig - step;
            let down = loss(&probe);
            probe.value_mut(id).data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        let a = &analytic[id.0];
        let diff: f64 = a
            .data()
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let na = a.norm();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        entries.push(GradCheckEntry {
            name: name.to_string(),
            rel_error: diff / na.max(nn).max(floor),
            analytic_norm: na,
        });
    }
    GradCheckReport { entries }
}
