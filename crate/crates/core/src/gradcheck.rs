//! Central finite-difference checking of analytic gradients.
//!
//! Only the loss closure is evaluated here; the analytic side is whatever the
//! caller computed. Used by the test suites.

use crate::neuralnet::{Gradients, MlpModel};

/// Denominator floor for the relative error of near-zero gradients.
///
/// With a loss near 0.1 and a step of 1e-5, cancellation in the central
/// difference leaves an absolute error around 1e-12, so entries below this
/// floor are effectively compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub checked: usize,
}

/// Compare every analytic gradient entry against
/// `(L(θ + h) − L(θ − h)) / 2h`.
pub fn check(
    model: &MlpModel,
    grads: &Gradients,
    loss: impl Fn(&MlpModel) -> f64,
    step: f64,
) -> GradCheck {
    let analytic: Vec<Vec<f64>> = grads.as_slices().iter().map(|s| s.to_vec()).collect();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (t, tensor) in analytic.iter().enumerate() {
        for (i, &a) in tensor.iter().enumerate() {
            let orig = probe.parameters_mut()[t][i];
            probe.parameters_mut()[t][i] = orig + step;
            let plus = loss(&probe);
            probe.parameters_mut()[t][i] = orig - step;
            let minus = loss(&probe);
            probe.parameters_mut()[t][i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let denom = a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
            checked += 1;
        }
    }
    GradCheck {
        max_relative_error: worst,
        checked,
    }
}

pub fn max_relative_error(
    model: &MlpModel,
    grads: &Gradients,
    loss: impl Fn(&MlpModel) -> f64,
    step: f64,
) -> f64 {
    check(model, grads, loss, step).max_relative_error
}
