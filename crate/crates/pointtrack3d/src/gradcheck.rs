//! Central finite-difference gradient verification.
//!
//! Used by the test suites to compare analytic gradients from the tape
//! against numerical derivatives in double precision.

use crate::autodiff::{Tape, Tensor, Var};

/// Relative error with an absolute floor so near-zero gradients compare
/// sensibly: `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central difference gradient of a scalar function of a flat vector.
pub fn central_diff<F>(mut f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = f(&probe);
        probe[i] = x[i] - eps;
        let minus = f(&probe);
        probe[i] = x[i];
        grads.push((plus - minus) / (2.0 * eps));
    }
    grads
}

/// Compare analytic gradients of a scalar-valued tape program against
/// central finite differences.
///
/// `build` must construct a fresh tape from the given input tensors and
/// return the tape, the leaf vars corresponding to the inputs (same order),
/// and the scalar loss var. Returns the maximum relative error over every
/// component of every input.
pub fn check_gradient<F>(inputs: &[Tensor], build: F, eps: f64) -> f64
where
    F: Fn(&[Tensor]) -> (Tape, Vec<Var>, Var),
{
    let (tape, vars, loss) = build(inputs);
    assert_eq!(vars.len(), inputs.len());
    let grads = tape.backward(loss);

    let eval = |perturbed: &[Tensor]| -> f64 {
        let (tape, _, loss) = build(perturbed);
        let v = tape.value(loss).item();
        assert!(v.is_finite(), "non-finite loss during finite differencing");
        v
    };

    let mut worst: f64 = 0.0;
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[which])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.rows(), input.cols()));
        let mut work: Vec<Tensor> = inputs.to_vec();
        for i in 0..input.data().len() {
            let orig = input.data()[i];
            work[which].data_mut()[i] = orig + eps;
            let plus = eval(&work);
            work[which].data_mut()[i] = orig - eps;
            let minus = eval(&work);
            work[which].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            worst = worst.max(rel_error(analytic.data()[i], fd));
        }
    }
    worst
}
