//! Finite-difference verification of analytic gradients.
//!
//! [`check_gradients`] runs one reverse pass to collect analytic gradients,
//! then re-evaluates the loss under central-difference perturbations of
//! sampled parameter coordinates. A coordinate passes when
//! `|analytic - numeric| <= rel_tol * max(|analytic|, |numeric|) + abs_tol`;
//! the absolute floor absorbs floating-point noise at near-zero gradients.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::params::ParameterSet;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct CheckSettings {
    /// Central-difference step.
    pub h: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Coordinates sampled per tensor (all coordinates if the tensor is smaller).
    pub coords_per_tensor: usize,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings {
            h: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-8,
            coords_per_tensor: 6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckFailure {
    pub param: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

impl std::fmt::Display for CheckFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "gradient mismatch in '{}'[{}]: analytic {:.6e}, numeric {:.6e}, rel err {:.3e}",
            self.param, self.coord, self.analytic, self.numeric, self.rel_err
        )
    }
}

/// Largest relative error observed across the checked coordinates whose
/// magnitude makes the relative tolerance binding (`rel_tol * scale >=
/// abs_tol`). Below that scale the finite-difference estimate is dominated
/// by roundoff and only the absolute floor is meaningful.
pub type MaxRelErr = f64;

/// Verifies the gradients of a scalar loss against central differences.
///
/// `build` must be a pure function of the current parameter values: it is
/// invoked once for the analytic pass and twice per sampled coordinate.
/// Batches or sampled indices a loss depends on must be fixed *before*
/// calling to keep the perturbed evaluations comparable.
pub fn check_gradients(
    params: &mut ParameterSet,
    settings: &CheckSettings,
    rng: &mut ChaCha8Rng,
    mut build: impl FnMut(&mut Tape, &ParameterSet) -> NodeId,
) -> Result<MaxRelErr, Box<CheckFailure>> {
    params.zero_grads();
    let mut tape = Tape::new();
    let loss = build(&mut tape, params);
    tape.backward(loss, params)
        .expect("gradient check build must produce a scalar loss");
    let analytic: Vec<Tensor> = params.ids().map(|id| params.grad(id).clone()).collect();
    params.zero_grads();

    let mut max_rel: f64 = 0.0;
    let ids: Vec<_> = params.ids().collect();
    for (slot, id) in ids.iter().enumerate() {
        let len = params.value(*id).len();
        let mut coords: Vec<usize> = (0..len).collect();
        coords.shuffle(rng);
        coords.truncate(settings.coords_per_tensor.min(len));
        for coord in coords {
            let orig = params.value(*id).data()[coord];

            params.value_mut(*id).data_mut()[coord] = orig + settings.h;
            let mut t = Tape::new();
            let l = build(&mut t, params);
            let up = t.value(l).item();

            params.value_mut(*id).data_mut()[coord] = orig - settings.h;
            let mut t = Tape::new();
            let l = build(&mut t, params);
            let down = t.value(l).item();

            params.value_mut(*id).data_mut()[coord] = orig;

            let numeric = (up - down) / (2.0 * settings.h);
            let a = analytic[slot].data()[coord];
            let scale = a.abs().max(numeric.abs());
            let diff = (a - numeric).abs();
            let rel = diff / scale.max(1e-12);
            if diff > settings.rel_tol * scale + settings.abs_tol {
                return Err(Box::new(CheckFailure {
                    param: params.name(*id).to_string(),
                    coord,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                }));
            }
            if settings.rel_tol * scale >= settings.abs_tol {
                max_rel = max_rel.max(rel);
            }
        }
    }
    Ok(max_rel)
}
