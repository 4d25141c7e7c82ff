//! f64 math for `no_std` builds, routed through `libm` so results are
//! bit-identical across platforms.

pub use libm::{atan2, ceil, cos, exp, fabs as abs, floor, log as ln, log10, pow, round, sin, sqrt};

pub const PI: f64 = core::f64::consts::PI;

/// Numerically stable logistic function, split on sign.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// log(exp(a) + exp(b)) without overflow.
pub fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ln(exp(a - m) + exp(b - m))
}
