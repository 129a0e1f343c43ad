//! Central finite-difference verification of analytic gradients.

use crate::nn::params::ParameterSet;
use crate::Result;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Result of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error seen across the checked coordinates.
    pub max_rel_err: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

const FD_STEP: f64 = 1e-5;

/// Compare analytic gradients against central differences.
///
/// `loss_fn` must evaluate the scalar loss at the current parameter values
/// without mutating anything else; it is called twice per checked
/// coordinate. `analytic` holds the gradient for each parameter, parallel
/// to the set. At most `max_coords` coordinates are checked, chosen
/// uniformly (seeded); pass `usize::MAX` to sweep everything.
pub fn finite_diff_check(
    params: &mut ParameterSet,
    analytic: &[Vec<f64>],
    max_coords: usize,
    seed: u64,
    mut loss_fn: impl FnMut(&ParameterSet) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for idx in 0..params.len() {
        for i in 0..params.value(idx).len() {
            coords.push((idx, i));
        }
    }
    if coords.len() > max_coords {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(max_coords);
        coords.sort_unstable();
    }

    let mut max_rel = 0.0_f64;
    let mut worst = None;
    for &(idx, i) in &coords {
        let orig = params.value(idx).data()[i];
        params.value_mut(idx).data_mut()[i] = orig + FD_STEP;
        let plus = loss_fn(params)?;
        params.value_mut(idx).data_mut()[i] = orig - FD_STEP;
        let minus = loss_fn(params)?;
        params.value_mut(idx).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let exact = analytic[idx][i];
        let rel = (exact - numeric).abs() / (exact.abs() + numeric.abs() + 1e-8);
        if rel > max_rel {
            max_rel = rel;
            worst = Some((params.name(idx).to_string(), i));
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst,
        checked: coords.len(),
    })
}

/// Snapshot the current analytic gradients of a set, parallel to it.
pub fn grads_snapshot(params: &ParameterSet) -> Vec<Vec<f64>> {
    (0..params.len()).map(|i| params.grad(i).data().to_vec()).collect()
}
