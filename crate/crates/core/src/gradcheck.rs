//! Central-difference gradient oracle.
//!
//! Test support: evaluates an objective as a black box, perturbing one leaf
//! entry at a time, so the numeric gradient never touches the tape's
//! backward rules. Meant to run at `f64` with step 1e-3.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;

/// Numeric gradient of `objective` w.r.t. every entry of `leaf`, by central
/// differences: (f(x+h) − f(x−h)) / 2h. The objective receives the whole
/// perturbed tensor and must rebuild its computation from scratch.
pub fn central_difference<S, F>(leaf: &Tensor<S>, mut objective: F, step: f64) -> Vec<S>
where
    S: Scalar,
    F: FnMut(&Tensor<S>) -> S,
{
    let h = S::from_f64(step);
    let mut probe = leaf.clone();
    let mut grad = vec![S::zero(); leaf.numel()];
    for i in 0..leaf.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = objective(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = objective(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (plus - minus) / (h + h);
    }
    grad
}

/// Largest relative disagreement between analytic and numeric gradients.
/// Near-zero pairs (both below `floor`) compare absolutely.
pub fn max_relative_error<S: Scalar>(analytic: &[S], numeric: &[S], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let floor_s = floor;
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let (a, n) = (a.as_f64(), n.as_f64());
            let denom = a.abs().max(n.abs());
            if denom < floor_s {
                (a - n).abs() / floor_s
            } else {
                (a - n).abs() / denom
            }
        })
        .fold(0.0, f64::max)
}

/// Convenience: check one leaf of an objective and panic with context on
/// disagreement beyond `tol` relative error.
pub fn assert_gradient_close<S, F>(
    name: &str,
    leaf: &Tensor<S>,
    analytic: &[S],
    objective: F,
    tol: f64,
) where
    S: Scalar,
    F: FnMut(&Tensor<S>) -> S,
{
    let numeric = central_difference(leaf, objective, DEFAULT_STEP);
    let err = max_relative_error(analytic, &numeric, 1e-6);
    assert!(
        err <= tol,
        "{name}: analytic vs central-difference gradient disagree, max rel err {err:.3e} > {tol:.1e}"
    );
}
