//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gradient, Model, Objective};
use crate::error::Result;

/// Gradients smaller than this are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Tensor name, flat index, analytic and numeric values of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares the analytic gradient with `(L(x+h) - L(x-h)) / 2h` on `n_coords`
/// coordinates drawn uniformly from all tensors (`None` checks every one).
pub fn check_gradients(
    model: &Model,
    objective: &dyn Objective,
    n_coords: Option<usize>,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let analytic = gradient(model, objective)?;
    let names: Vec<(&'static str, usize)> =
        analytic.tensors().iter().map(|(n, t)| (*n, t.len())).collect();
    let total: usize = names.iter().map(|(_, l)| l).sum();
    let coords: Vec<usize> = match n_coords {
        None => (0..total).collect(),
        Some(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| rng.random_range(0..total)).collect()
        }
    };

    let locate = |flat: usize| {
        let mut rest = flat;
        for (ti, (_, len)) in names.iter().enumerate() {
            if rest < *len {
                return (ti, rest);
            }
            rest -= len;
        }
        unreachable!("coordinate within total")
    };

    let mut probe = model.clone();
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None };
    for flat in coords {
        let (ti, idx) = locate(flat);
        let original = {
            let mut ts = probe.params.tensors_mut();
            let slot = ts[ti].1.as_slice_mut().expect("contiguous tensor");
            let o = slot[idx];
            slot[idx] = o + step;
            o
        };
        let plus = objective.loss(&probe)?;
        probe.params.tensors_mut()[ti].1.as_slice_mut().expect("contiguous tensor")[idx] = original - step;
        let minus = objective.loss(&probe)?;
        probe.params.tensors_mut()[ti].1.as_slice_mut().expect("contiguous tensor")[idx] = original;

        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.tensors()[ti].1.as_slice().expect("contiguous tensor")[idx];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((names[ti].0.to_string(), idx, a, numeric));
        }
    }
    Ok(report)
}
