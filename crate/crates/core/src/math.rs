//! Scalar functions on `f64` for a `no_std` build.

pub use libm::{exp, expm1, fabs, log, log1p, round, sqrt, tanh};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + log1p(exp(-x))
    } else {
        log1p(exp(x))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        expm1(x)
    }
}

/// Derivative of [`elu`].
#[inline]
pub fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        exp(x)
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Heaviside step with `step(0) = 0`.
#[inline]
pub fn step(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `log(e^x + e^-x)`, whose derivative is `tanh`.
#[inline]
pub fn log_cosh2(x: f64) -> f64 {
    let a = fabs(x);
    a + log1p(exp(-2.0 * a))
}

#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
