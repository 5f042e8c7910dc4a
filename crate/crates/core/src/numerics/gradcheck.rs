//! Central finite-difference verification of tape gradients.
//!
//! The numeric side recomputes the forward pass at perturbed parameter
//! values and never touches the tape's backward machinery, so it stays an
//! independent oracle for it.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamSet, Tape, Var};

/// Forward pass builder: must return a scalar loss on the given tape.
pub type ScalarFn<'a> = &'a mut dyn FnMut(&ParamSet, &mut Tape) -> Var;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Relative tolerance.
    pub rtol: f64,
    /// Denominator floor; below it the comparison is effectively absolute,
    /// which keeps finite-difference noise from failing true zero gradients.
    pub floor: f64,
    /// Coordinates sampled per parameter tensor (all, if fewer exist).
    pub coords_per_param: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            rtol: 1e-4,
            floor: 1e-4,
            coords_per_param: 6,
        }
    }
}

#[derive(Debug)]
pub struct GradCheckFailure {
    pub param: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

impl std::fmt::Display for GradCheckFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "gradient mismatch on {}[{}]: analytic {:.6e}, numeric {:.6e}, rel {:.3e}",
            self.param, self.coord, self.analytic, self.numeric, self.rel_err
        )
    }
}

/// Checks analytic gradients of `forward` against central differences on a
/// random sample of coordinates of each listed parameter.
pub fn check_gradients(
    params: &mut ParamSet,
    ids: &[ParamId],
    forward: ScalarFn,
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(), GradCheckFailure> {
    // analytic pass
    let mut tape = Tape::new();
    let loss = forward(params, &mut tape);
    tape.backward(loss).expect("loss must be scalar");
    let analytic = tape.param_grads();

    for &id in ids {
        let numel = params.value(id).numel();
        let mut coords: Vec<usize> = (0..numel).collect();
        coords.shuffle(rng);
        coords.truncate(cfg.coords_per_param.min(numel));
        for coord in coords {
            let a = analytic
                .get(&id)
                .map(|g| g[coord])
                .unwrap_or(0.0);
            let n = central_difference(params, id, coord, cfg.step, forward);
            let denom = a.abs().max(n.abs()).max(cfg.floor);
            let rel = (a - n).abs() / denom;
            if rel > cfg.rtol {
                return Err(GradCheckFailure {
                    param: params.get(id).name.clone(),
                    coord,
                    analytic: a,
                    numeric: n,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(())
}

/// Central difference of the forward loss w.r.t. one parameter coordinate.
pub fn central_difference(
    params: &mut ParamSet,
    id: ParamId,
    coord: usize,
    step: f64,
    forward: ScalarFn,
) -> f64 {
    let original = params.value(id).data()[coord];

    params.get_mut(id).value.data_mut()[coord] = original + step;
    let mut tape = Tape::new();
    let up = forward(params, &mut tape);
    let f_plus = tape.value(up).data()[0];

    params.get_mut(id).value.data_mut()[coord] = original - step;
    let mut tape = Tape::new();
    let down = forward(params, &mut tape);
    let f_minus = tape.value(down).data()[0];

    params.get_mut(id).value.data_mut()[coord] = original;
    (f_plus - f_minus) / (2.0 * step)
}

/// Uniform random values in [-1, 1] for gradcheck fixtures.
pub fn random_unit_data(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}
