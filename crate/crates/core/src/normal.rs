//! Standard normal density, distribution function and the ratios EP needs,
//! evaluated so that far-tail arguments neither underflow nor lose precision.

use libm::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Below this argument `log_cdf` and `pdf_over_cdf` switch to the asymptotic
/// series instead of `erfc`.
const TAIL: f64 = -30.0;

/// Standard normal density N(z).
pub fn pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Standard normal cumulative distribution Φ(z).
pub fn cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

/// log Φ(z), finite for every finite argument.
pub fn log_cdf(z: f64) -> f64 {
    if z > 5.0 {
        // Φ(z) = 1 - Φ(-z); ln_1p keeps the tiny complement.
        (-cdf(-z)).ln_1p()
    } else if z > TAIL {
        cdf(z).ln()
    } else {
        // Mills ratio expansion: Φ(z) ~ N(z)/(-z) (1 - 1/z² + 3/z⁴ - 15/z⁶)
        let z2 = z * z;
        let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2);
        -0.5 * z2 - LN_SQRT_2PI - (-z).ln() + series.ln()
    }
}

/// N(z)/Φ(z) (inverse Mills ratio), stable in the left tail where both
/// numerator and denominator underflow.
pub fn pdf_over_cdf(z: f64) -> f64 {
    if z > TAIL {
        (pdf(z).ln() - log_cdf(z)).exp()
    } else {
        let z2 = z * z;
        let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2);
        -z / series
    }
}
