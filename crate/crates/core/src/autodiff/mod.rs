//! Minimal reverse-mode differentiable tensor engine.
//!
//! Only the primitives a small Vision Transformer and its attack losses need
//! are provided. [`finite_difference_gradient`] is the independent oracle used
//! to validate every backward rule.

mod tape;
mod tensor;

pub use tape::{softmax_rows, Gradients, Tape, Var};
pub use tensor::Tensor;


/// Default central-difference step in double precision.
pub const FD_STEP: f64 = 1e-5;

/// Central-difference estimate of `∇f(x)`, one coordinate at a time.
pub fn finite_difference_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
