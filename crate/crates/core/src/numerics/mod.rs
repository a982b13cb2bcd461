//! Small deterministic dense-network substrate: matrices, affine layers with
//! hand-written backward passes, Adam, and a finite-difference gradient checker.

mod adam;
pub mod gradcheck;
mod layer;
mod matrix;
mod params;

pub use adam::Adam;
pub use gradcheck::{grad_check, BlockReport, GradCheckConfig, GradCheckReport, Probe};
pub use layer::{sigmoid, softmax_in_place, softplus, Activation, DenseCache, DenseLayer, Mlp, MlpCache, SIGMOID_EPS};
pub use matrix::Matrix;
pub use params::{BlockId, ParamBlock, ParamStore, Role};

/// Lower bound applied to every logarithm argument.
pub const LOG_FLOOR: f64 = 1e-12;

/// `ln(max(x, LOG_FLOOR))`, with the derivative factor `1/x` (0 when clamped).
#[inline]
pub fn clamped_ln(x: f64) -> (f64, f64, bool) {
    if x < LOG_FLOOR {
        (LOG_FLOOR.ln(), 0.0, true)
    } else {
        (x.ln(), 1.0 / x, false)
    }
}
