//! Standard-normal scalar helpers.
//!
//! EP site updates need `log Φ(z)` and the ratio `φ(z)/Φ(z)` far into the
//! lower tail, where a direct `φ/Φ` evaluation underflows. Below `z = -6`
//! both are computed from the continued-fraction expansion of the upper-tail
//! Mills ratio, which also yields `φ(z)/Φ(z) + z` without cancellation.

use std::f64::consts::{PI, SQRT_2};

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

const TAIL_SWITCH: f64 = -10.0;

/// Standard normal density `φ(z)`.
#[inline]
pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Standard normal distribution function `Φ(z)`.
#[inline]
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Tail `t(x)` of `Q(x) = φ(x) / (x + t(x))` for the upper-tail probability
/// `Q(x) = 1 - Φ(x)`, from the alternating asymptotic expansion
/// `Q(x) = φ(x)/x * (1 - 1/x² + 3/x⁴ - ...)`. Machine precision for
/// `x >= 10`; the truncation error is bounded by the first dropped term.
fn mills_tail(x: f64) -> f64 {
    let x2 = x * x;
    // u = 1 - S = 1/x² - 3/x⁴ + 15/x⁶ - ...
    let mut term = 1.0 / x2;
    let mut u = term;
    let mut sign = -1.0;
    for k in 2..=30 {
        term *= (2.0 * k as f64 - 1.0) / x2;
        u += sign * term;
        if term < 1e-17 * u {
            break;
        }
        sign = -sign;
    }
    // ratio = x / S, so t = ratio - x = x u / (1 - u).
    x * u / (1.0 - u)
}

/// `log Φ(z)`, stable for arbitrarily negative `z` and strictly negative
/// through the upper tail (up to the underflow of the complementary
/// probability near `z = 37.5`).
pub fn log_norm_cdf(z: f64) -> f64 {
    if z > 8.0 {
        // ln(1 - Q) where Φ(z) itself would round to 1.
        let q = 0.5 * libm::erfc(z / SQRT_2);
        (-q).ln_1p()
    } else if z > TAIL_SWITCH {
        norm_cdf(z).ln()
    } else {
        let x = -z;
        -0.5 * z * z - 0.5 * LN_2PI - (x + mills_tail(x)).ln()
    }
}

/// Returns `(φ(z)/Φ(z), φ(z)/Φ(z) + z)`.
///
/// The second component is the quantity that actually enters the tilted
/// variance; in the lower tail it is the small continued-fraction tail
/// itself rather than a difference of two large numbers.
pub fn gauss_cdf_ratio(z: f64) -> (f64, f64) {
    if z > TAIL_SWITCH {
        let r = norm_pdf(z) / norm_cdf(z);
        (r, r + z)
    } else {
        let x = -z;
        let t = mills_tail(x);
        (x + t, t)
    }
}
