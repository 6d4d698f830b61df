//! Shared scalar statistics: means, medians, and the special functions needed
//! for Student-t tail probabilities.
//!
//! The t-distribution CDF is evaluated through the regularized incomplete
//! beta function, computed with a continued fraction (modified Lentz scheme).
//! This keeps the whole significance pipeline dependency-free and gives
//! ~1e-14 relative accuracy over the parameter ranges we use (integer and
//! half-integer shape parameters, tail probabilities down to ~1e-300).

use std::f64::consts::PI;

/// Lanczos coefficients for g = 7, n = 9, quoted with every source digit.
#[allow(clippy::excessive_precision)]
const LANCZOS: [f64; 8] = [
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `z > 0`.
#[allow(clippy::excessive_precision)] // leading series term quoted in full
pub fn ln_gamma(z: f64) -> f64 {
    assert!(z > 0.0, "ln_gamma requires a positive argument, got {z}");
    let z = z - 1.0;
    let mut acc = 0.999_999_999_999_809_93;
    for (i, c) in LANCZOS.iter().enumerate() {
        acc += c / (z + i as f64 + 1.0);
    }
    let t = z + 7.5;
    0.5 * (2.0 * PI).ln() + (z + 0.5) * t.ln() - t + acc.ln()
}

/// Continued-fraction kernel for the incomplete beta function.
///
/// Evaluates the standard expansion of `I_x(a, b) * a / (x^a (1-x)^b)` using
/// the modified Lentz algorithm. Only valid (rapidly convergent) for
/// `x < (a + 1) / (a + b + 2)`; callers flip to the symmetric form otherwise.
fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1.0e-15;
    const TINY: f64 = 1.0e-30;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;

    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;

    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;

        // Even step of the recurrence.
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;

        // Odd step.
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)` for `a, b > 0` and
/// `x` in `[0, 1]`.
pub fn betainc_reg(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "betainc_reg requires positive shape parameters");
    assert!((0.0..=1.0).contains(&x), "betainc_reg requires x in [0, 1], got {x}");
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    // x^a (1-x)^b / B(a, b), shared by both symmetric branches.
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

/// Two-sided tail probability `P(|T| >= t)` for Student's t with `df`
/// degrees of freedom. Uses `P(|T| >= t) = I_x(df/2, 1/2)` with
/// `x = df / (df + t^2)`.
///
/// An infinite statistic (e.g. from a perfect rank correlation) yields 0.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    assert!(df > 0.0, "degrees of freedom must be positive, got {df}");
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    betainc_reg(0.5 * df, 0.5, df / (df + t * t))
}

/// Arithmetic mean. Empty input is a caller bug.
pub fn mean(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "mean of an empty slice");
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with the n-1 denominator. Requires at least two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    assert!(xs.len() >= 2, "sample variance needs at least two values");
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Sample standard deviation (n-1 denominator).
pub fn sample_std(xs: &[f64]) -> f64 {
    sample_variance(xs).sqrt()
}

/// Median; for an even count, the mean of the two middle order statistics.
/// Empty input is a caller bug (empty groups are dropped upstream).
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of an empty slice");
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(got: f64, want: f64, tol: f64) {
        assert!(
            (got - want).abs() <= tol,
            "got {got}, want {want} (tol {tol})"
        );
    }

    #[test]
    fn ln_gamma_known_values() {
        close(ln_gamma(1.0), 0.0, 1e-13);
        close(ln_gamma(2.0), 0.0, 1e-13);
        close(ln_gamma(0.5), 0.572_364_942_924_700_1, 1e-13); // ln sqrt(pi)
        close(ln_gamma(5.0), 24.0_f64.ln(), 1e-12);
        close(ln_gamma(10.0), 362_880.0_f64.ln(), 1e-11);
    }

    #[test]
    fn betainc_closed_forms() {
        // I_x(1, 1) = x
        for &x in &[0.0, 0.1, 0.5, 0.9, 1.0] {
            close(betainc_reg(1.0, 1.0, x), x, 1e-14);
        }
        // I_x(2, 2) = 3x^2 - 2x^3
        for &x in &[0.1, 0.3, 0.5, 0.8] {
            close(betainc_reg(2.0, 2.0, x), 3.0 * x * x - 2.0 * x * x * x, 1e-13);
        }
        // I_x(1, b) = 1 - (1 - x)^b
        close(betainc_reg(1.0, 4.0, 0.2), 1.0 - 0.8f64.powi(4), 1e-13);
        // Symmetry: I_x(a, b) + I_{1-x}(b, a) = 1
        for &(a, b, x) in &[(2.5, 3.5, 0.37), (0.5, 9.0, 0.11), (8.0, 0.5, 0.93)] {
            close(betainc_reg(a, b, x) + betainc_reg(b, a, 1.0 - x), 1.0, 1e-12);
        }
        close(betainc_reg(3.0, 3.0, 0.5), 0.5, 1e-13);
    }

    /// Critical values from a standard two-sided t table: P(|T| >= t) = p.
    #[test]
    fn t_tail_matches_t_table() {
        let table: &[(f64, f64, f64)] = &[
            // (df, t, two-sided p)
            (1.0, 12.706, 0.05),
            (1.0, 63.657, 0.01),
            (2.0, 4.303, 0.05),
            (3.0, 3.182, 0.05),
            (4.0, 2.776, 0.05),
            (5.0, 2.571, 0.05),
            (10.0, 2.228, 0.05),
            (10.0, 3.169, 0.01),
            (20.0, 2.086, 0.05),
            (30.0, 2.042, 0.05),
            (60.0, 2.000, 0.05),
            (100.0, 1.984, 0.05),
            (120.0, 3.373, 0.001),
        ];
        for &(df, t, p) in table {
            let got = t_two_sided_p(t, df);
            assert!(
                (got - p).abs() < 5e-4,
                "df={df} t={t}: got {got}, want {p}"
            );
        }
    }

    #[test]
    fn t_tail_edge_cases() {
        close(t_two_sided_p(0.0, 5.0), 1.0, 1e-15);
        assert_eq!(t_two_sided_p(f64::INFINITY, 5.0), 0.0);
        // Symmetric in t.
        close(
            t_two_sided_p(-2.5, 7.0),
            t_two_sided_p(2.5, 7.0),
            1e-15,
        );
        // Monotone decreasing in |t|.
        assert!(t_two_sided_p(1.0, 9.0) > t_two_sided_p(2.0, 9.0));
        // Large-df limit approaches the normal tail: P(|Z| >= 1.96) ~ 0.05.
        close(t_two_sided_p(1.96, 1.0e6), 0.05, 1e-3);
    }

    #[test]
    fn median_midpoint_rule() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
        assert_eq!(median(&[2.0, 2.0, 2.0, 9.0]), 2.0);
    }

    #[test]
    fn moments() {
        close(mean(&[1.0, 2.0, 3.0, 4.0]), 2.5, 1e-15);
        close(sample_variance(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]), 4.571_428_571_428_571, 1e-12);
        close(sample_std(&[1.0, 2.0, 3.0]), 1.0, 1e-15);
    }
}
