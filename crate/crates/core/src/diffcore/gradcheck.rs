//! Central finite-difference checks for tape gradients.

use super::tape::{Shape, Tape, Var};
use crate::error::{Error, Result};

/// Default perturbation for central differences.
pub const FD_EPS: f64 = 1e-5;

/// `|analytic − numeric| / (|analytic| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + 1e-8)
}

/// Gradient magnitude below which parameter checks measure errors in
/// absolute terms. Differences of whole-model losses carry rounding noise
/// near 1e-11, which swamps exactly-zero gradients under a 1e-8 floor.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `|analytic − numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
pub fn floored_relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares the tape gradient of a scalar function with central differences
/// over every entry of every input. Returns the worst relative error.
pub fn check_inputs<F>(inputs: &[(Shape, Vec<f64>)], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[(Shape, Vec<f64>)]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|(s, v)| tape.variable(*s, v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|(s, v)| tape.variable(*s, v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    if !tape.shape(out).is_scalar() {
        return Err(Error::Contract("gradient check needs a scalar output".into()));
    }
    tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = tape.grad(v);
        for e in 0..work[k].1.len() {
            let orig = work[k].1[e];
            work[k].1[e] = orig + eps;
            let up = eval(&work)?;
            work[k].1[e] = orig - eps;
            let down = eval(&work)?;
            work[k].1[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[e], numeric));
        }
    }
    Ok(worst)
}

/// Random weights used to project a tensor output down to a scalar, so every
/// output entry contributes a distinct upstream gradient.
pub fn projection(tape: &mut Tape, y: Var, weights: &[f64]) -> Result<Var> {
    let w = tape.constant(tape.shape(y), weights.to_vec())?;
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}
