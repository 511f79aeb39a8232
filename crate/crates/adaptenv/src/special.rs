//! Scalar special functions shared by the policy and theory modules.
//!
//! `ln_gamma`/`digamma` come from `statrs`; the trigamma function is not
//! exposed there, so it is implemented here via the standard recurrence plus
//! the asymptotic expansion.

pub use statrs::function::gamma::{digamma, ln_gamma};

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    // max(x, 0) + ln(1 + e^{-|x|})
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Derivative of softplus: the logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus: `ln(e^y - 1)` for y > 0.
pub fn inv_softplus(y: f64) -> f64 {
    assert!(y > 0.0, "inv_softplus requires y > 0");
    y + (-(-y).exp()).ln_1p()
}

/// Trigamma function ψ₁(x) for x > 0.
///
/// Uses ψ₁(x) = ψ₁(x + 1) + 1/x² to shift the argument above 6, then the
/// asymptotic series 1/x + 1/(2x²) + Σ B₂ₙ/x^{2n+1}.
pub fn trigamma(x: f64) -> f64 {
    assert!(x > 0.0, "trigamma requires x > 0");
    let mut acc = 0.0;
    let mut x = x;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // 1/x + 1/(2x^2) + 1/(6x^3) - 1/(30x^5) + 1/(42x^7) - 1/(30x^9) + 5/(66x^11)
    let series = inv
        + 0.5 * inv2
        + inv * inv2
            * (1.0 / 6.0
                - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0))));
    acc + series
}

/// `ln B(a, b) = ln Γ(a) + ln Γ(b) - ln Γ(a + b)`.
pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Max-shifted `ln Σ e^{xᵢ}`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Softmax of `xs` (max-shifted).
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn softplus_known_values() {
        assert_relative_eq!(softplus(0.0), 2.0_f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(softplus(20.0), 20.0, epsilon = 1e-8);
        assert!(softplus(-40.0) > 0.0 && softplus(-40.0) < 1e-15);
    }

    #[test]
    fn inv_softplus_round_trip() {
        for &y in &[1e-3, 0.1, 1.0, 5.0, 30.0] {
            assert_relative_eq!(softplus(inv_softplus(y)), y, max_relative = 1e-12);
        }
    }

    #[test]
    fn trigamma_known_values() {
        assert_relative_eq!(trigamma(1.0), PI * PI / 6.0, max_relative = 1e-12);
        assert_relative_eq!(trigamma(0.5), PI * PI / 2.0, max_relative = 1e-12);
        assert_relative_eq!(trigamma(2.0), PI * PI / 6.0 - 1.0, max_relative = 1e-12);
    }

    #[test]
    fn trigamma_matches_digamma_finite_difference() {
        for &x in &[0.3f64, 0.7, 1.5, 3.2, 10.0, 50.0] {
            let h = 1e-5 * x.max(1.0);
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert_relative_eq!(trigamma(x), fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn log_sum_exp_shift_safe() {
        let v = [1000.0, 1000.0];
        assert_relative_eq!(log_sum_exp(&v), 1000.0 + 2.0_f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(
            log_sum_exp(&[0.0, (2.0_f64).ln()]),
            3.0_f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn softmax_normalizes() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(p[2] > p[1] && p[1] > p[0]);
    }
}
