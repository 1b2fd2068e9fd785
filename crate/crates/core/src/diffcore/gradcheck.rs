//! Central-difference gradient checking against the tape's analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::error::{DiffError, Result};
use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub coords_checked: usize,
}

fn eval<F>(store: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = f(&mut tape, store)?;
    let v = tape.value(root);
    v.item().ok_or_else(|| DiffError::NonScalarRoot {
        shape: v.shape().to_vec(),
    })
}

/// Max over every coordinate of every trainable parameter of
/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    grad_check_sampled(store, eps, None, 0, f).map(|r| r.max_relative_error)
}

/// Like [`grad_check`], optionally checking at most `max_per_param` randomly
/// chosen coordinates of each parameter.
pub fn grad_check_sampled<F>(
    store: &mut ParamStore,
    eps: f64,
    max_per_param: Option<usize>,
    seed: u64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(DiffError::InvalidConfig(format!("grad_check eps {eps} outside (0, 1e-3]")));
    }
    store.zero_grads();
    let mut tape = Tape::new();
    let root = f(&mut tape, store)?;
    tape.backward(root, store)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: None,
        worst_index: 0,
        coords_checked: 0,
    };
    let ids: Vec<ParamId> = store.ids().filter(|id| store.get(*id).trainable()).collect();
    for id in ids {
        let n = store.get(id).tensor().numel();
        let analytic = store.get(id).grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = match max_per_param {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let mut values = store.get(id).values().to_vec();
        for j in coords {
            let orig = values[j];
            values[j] = orig + eps;
            store.set_values(id, &values)?;
            let plus = eval(store, &mut f)?;
            values[j] = orig - eps;
            store.set_values(id, &values)?;
            let minus = eval(store, &mut f)?;
            values[j] = orig;
            store.set_values(id, &values)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic[j] - numeric).abs() / analytic[j].abs().max(1.0);
            report.coords_checked += 1;
            if err > report.max_relative_error || report.worst_param.is_none() {
                report.max_relative_error = err;
                report.worst_param = Some(store.get(id).name().to_string());
                report.worst_index = j;
            }
        }
    }
    store.zero_grads();
    Ok(report)
}
