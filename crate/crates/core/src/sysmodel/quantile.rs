//! Standard normal CDF and quantile, dependency-free.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Standard normal cumulative distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    if x.abs() < 3.0 {
        0.5 * (1.0 + erf_maclaurin(x * FRAC_1_SQRT_2))
    } else if x > 0.0 {
        1.0 - 0.5 * erfc_continued_fraction(x * FRAC_1_SQRT_2)
    } else {
        0.5 * erfc_continued_fraction(-x * FRAC_1_SQRT_2)
    }
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// `Φ⁻¹(q)` for `q ∈ (0, 1)`, accurate to about `1e-12`.
///
/// Panics when `q` lies outside the open unit interval.
pub fn normal_quantile(q: f64) -> f64 {
    assert!(q > 0.0 && q < 1.0, "quantile requires 0 < q < 1, got {q}");
    if q > 0.5 {
        return -normal_quantile(1.0 - q);
    }
    if q == 0.5 {
        return 0.0;
    }
    let mut x = acklam(q);
    for _ in 0..2 {
        let err = normal_cdf(x) - q;
        x -= err / normal_pdf(x);
    }
    x
}

/// Maclaurin series of erf; adequate for `|z| < 2.2`.
fn erf_maclaurin(z: f64) -> f64 {
    let z2 = z * z;
    let mut term = z;
    let mut sum = z;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= -z2 / n;
        let contrib = term / (2.0 * n + 1.0);
        sum += contrib;
        if contrib.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    sum * 2.0 / PI.sqrt()
}

/// erfc via its continued fraction (modified Lentz), for `z ≥ 2`.
fn erfc_continued_fraction(z: f64) -> f64 {
    // erfc(z) = exp(-z²)/√π · 1/(z + (1/2)/(z + 1/(z + (3/2)/(z + ...))))
    let tiny = 1e-300;
    let mut f = z;
    let mut c = z;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64 * 0.5;
        d = z + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = z + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-z * z).exp() / (PI.sqrt() * f)
}

/// Acklam's rational approximation (relative error about 1e-9), `q ≤ 0.5`.
fn acklam(q: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383_577_518_672_69e2,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if q < P_LOW {
        let t = (-2.0 * q.ln()).sqrt();
        (((((C[0] * t + C[1]) * t + C[2]) * t + C[3]) * t + C[4]) * t + C[5])
            / ((((D[0] * t + D[1]) * t + D[2]) * t + D[3]) * t + 1.0)
    } else {
        let s = q - 0.5;
        let r = s * s;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * s
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_is_zero() {
        assert_eq!(normal_quantile(0.5), 0.0);
    }

    #[test]
    fn reference_quantiles() {
        assert!((normal_quantile(0.975) - 1.959963985).abs() < 1e-9);
        assert!((normal_quantile(0.95) - 1.644853627).abs() < 1e-9);
    }

    #[test]
    fn cdf_branches_agree_at_switch() {
        let lo = 0.5 * (1.0 + erf_maclaurin(3.0 * FRAC_1_SQRT_2));
        let hi = 1.0 - 0.5 * erfc_continued_fraction(3.0 * FRAC_1_SQRT_2);
        assert!((lo - hi).abs() < 1e-14);
    }

    #[test]
    fn extreme_tails() {
        let x = normal_quantile(1e-10);
        assert!((normal_cdf(x) - 1e-10).abs() < 1e-20);
    }

    #[test]
    #[should_panic]
    fn rejects_one() {
        normal_quantile(1.0);
    }
}
