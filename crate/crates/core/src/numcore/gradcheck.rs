//! Central finite-difference verification of tape gradients, in `f64`.
//!
//! Derivatives use the fourth-order central stencil
//! `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`; the plain two-point
//! rule leaves O(h²) truncation error near 1e-6 at h = 1e-3.

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Magnitude below which errors are measured in absolute rather than relative terms.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckResult {
    pub worst_relative: f64,
    pub worst_absolute: f64,
    pub checked: usize,
}

impl GradCheckResult {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.worst_relative < tolerance
    }
}

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Builds the function on a fresh tape from `inputs` and compares the
/// analytic gradient of `sum(output)` against central differences for
/// every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, build: F) -> Result<GradCheckResult>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &ids)?;
        Ok(tape.value(out).values().iter().sum())
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let out = build(&mut tape, &ids)?;
    tape.backward(out, &Tensor::filled(tape.value(out).shape().to_vec(), 1.0)?)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(id).len()])
        })
        .collect();

    let mut result = GradCheckResult {
        worst_relative: 0.0,
        worst_absolute: 0.0,
        checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = probe[i].values()[j];
            let mut at = |delta: f64| -> Result<f64> {
                probe[i].values_mut()[j] = orig + delta;
                eval(&probe)
            };
            let (p1, m1, p2, m2) = (at(step)?, at(-step)?, at(2.0 * step)?, at(-2.0 * step)?);
            probe[i].values_mut()[j] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            result.worst_relative = result.worst_relative.max(relative_error(a, numeric));
            result.worst_absolute = result.worst_absolute.max((a - numeric).abs());
            result.checked += 1;
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-7, 0.0) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // d/dx sum(x*x) built as x*stop(x) has half the true gradient.
        let x = Tensor::vector(vec![0.3, -0.7, 0.9]).unwrap();
        let r = check_gradients(&[x], DEFAULT_STEP, |t, ids| {
            let frozen = t.constant(vec![3], t.value(ids[0]).values().to_vec())?;
            let sq = t.mul(ids[0], frozen)?;
            t.sum(sq)
        })
        .unwrap();
        assert!(!r.passes(DEFAULT_TOLERANCE));
    }
}
