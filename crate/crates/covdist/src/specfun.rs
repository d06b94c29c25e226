//! Real dilogarithm and the piecewise `Phi2` function used by the
//! log-Euclidean estimator.

use std::f64::consts::PI;

use crate::error::{Error, Result};

const PI2_6: f64 = PI * PI / 6.0;

/// Power series `sum x^k / k^2`, only called with `|x| <= 0.5`.
fn dilog_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = 0.0_f64;
    let mut k = 1.0_f64;
    while term.abs() > 1e-18 * sum.abs().max(1e-300) || k < 3.0 {
        sum += term / (k * k);
        term *= x;
        k += 1.0;
        if k > 200.0 {
            break;
        }
    }
    sum
}

fn dilog_unchecked(x: f64) -> f64 {
    if x == 1.0 {
        PI2_6
    } else if x == 0.0 {
        0.0
    } else if x.abs() <= 0.5 {
        dilog_series(x)
    } else if x > 0.5 {
        // Reflection: Li2(x) + Li2(1-x) = pi^2/6 - log(x) log(1-x).
        PI2_6 - x.ln() * (1.0 - x).ln() - dilog_series(1.0 - x)
    } else if x >= -1.0 {
        // Landen: Li2(x) = -Li2(x/(x-1)) - log^2(1-x)/2, with x/(x-1) in [1/3, 1/2).
        let l = (1.0 - x).ln();
        -dilog_series(x / (x - 1.0)) - 0.5 * l * l
    } else {
        // Inversion: Li2(x) + Li2(1/x) = -pi^2/6 - log^2(-x)/2 for x < 0.
        let l = (-x).ln();
        -PI2_6 - 0.5 * l * l - dilog_unchecked(1.0 / x)
    }
}

/// Real dilogarithm `Li2(x) = -int_0^x log(1-y)/y dy` for `x <= 1`.
pub fn dilog(x: f64) -> Result<f64> {
    if !(x <= 1.0) {
        return Err(Error::Domain(format!("dilog requires x <= 1, got {x}")));
    }
    Ok(dilog_unchecked(x))
}

/// `Phi2(x) = Li2(x)` for `0 < x < 1` and `pi^2/3 - log^2(x)/2 - Li2(1/x)` for `x >= 1`.
pub fn phi2(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("phi2 requires x > 0, got {x}")));
    }
    Ok(phi2_unchecked(x))
}

pub(crate) fn phi2_unchecked(x: f64) -> f64 {
    if x < 1.0 {
        dilog_unchecked(x)
    } else {
        let l = x.ln();
        PI * PI / 3.0 - 0.5 * l * l - dilog_unchecked(1.0 / x)
    }
}
