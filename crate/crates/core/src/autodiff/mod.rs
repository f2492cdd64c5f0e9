//! Reverse-mode automatic differentiation over dense arrays of `f64`.
//!
//! A [`Tape`] records every primitive operation applied to [`Var`] handles.
//! Calling [`Var::backward`] on a scalar result sweeps the tape once in reverse
//! and returns [`Gradients`] for every recorded node.
//!
//! ```
//! use vpt_core::autodiff::{Array, Tape};
//!
//! let tape = Tape::new();
//! let x = tape.var(Array::from_vec(vec![1.0, 2.0, 3.0]));
//! let loss = x.mul(x).unwrap().sum();
//! let grads = loss.backward().unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, 4.0, 6.0]);
//! ```

mod array;
pub mod special;
mod tape;

pub use array::Array;
pub use tape::{Gradients, Tape, Var};

/// `ln(1 + e^x)` without overflow for large `|x|`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, evaluated on the branch that never exponentiates a
/// positive argument.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x) = x − softplus(x)`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
#[inline]
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
