//! The non-closed-form demo problem exposed by the binary.

use mfld::{Problem, Result};
use mfld::problem::{Activation, CostLink, DriftLink, TerminalCost};
use ndarray::Array2;

/// Scalar single-layer policy demo: the averaged unit output
/// `alpha(t, x) = E_m tanh(theta x)` steers `dX = alpha dt + dW` toward the
/// origin against the running cost `(x^2 + alpha^2) / 2` and terminal cost
/// `x^2 / 2`.
///
/// There is no closed-form costate here, so runs on this problem must use
/// the regression adjoint.
pub fn scalar_tanh_policy() -> Result<Problem> {
    Problem::single_layer_policy(
        1,
        1,
        Array2::from_elem((1, 1), 1.0),
        DriftLink {
            eval: Box::new(|_x, a, out| out[0] = a),
            jac_x: Box::new(|_x, _a, out| out[0] = 0.0),
            grad_alpha: Box::new(|_x, _a, out| out[0] = 1.0),
        },
        CostLink {
            eval: Box::new(|x, a| 0.5 * (x[0] * x[0] + a * a)),
            grad_x: Box::new(|x, _a, out| out[0] = x[0]),
            grad_alpha: Box::new(|_x, a| a),
        },
        TerminalCost {
            eval: Box::new(|x| 0.5 * x[0] * x[0]),
            grad: Box::new(|x, out| out[0] = x[0]),
        },
        Activation {
            eval: Box::new(|x, th| (th[0] * x[0]).tanh()),
            grad_theta: Box::new(|x, th, out| {
                let t = (th[0] * x[0]).tanh();
                out[0] = x[0] * (1.0 - t * t);
            }),
            grad_x: Box::new(|x, th, out| {
                let t = (th[0] * x[0]).tanh();
                out[0] = th[0] * (1.0 - t * t);
            }),
        },
    )
}
