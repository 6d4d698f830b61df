//! Rank correlation and quadratic trend detection.
//!
//! Both routines work on paired observations (x = an uncertainty value,
//! y = a quality score). [`spearman`] gives the monotone association with a
//! t-based significance test; [`fit_quadratic`] standardizes x and fits
//! y = b0 + b1·z + b2·z² by ordinary least squares so that curvature, peak
//! location, and the variance uniquely explained by the quadratic term can be
//! read off directly. [`classify_shape`] turns a fit into one of five
//! mutually exclusive shape classes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::QualityError;
use crate::stats;

/// Significance level used by the shape rules unless a caller overrides it.
pub const DEFAULT_ALPHA: f64 = 0.05;

/// Peak-location window, in standardized x units, inside which significant
/// concavity counts as a genuine interior optimum.
pub const DEFAULT_RANGE_LIMIT: f64 = 2.5;

/// Spearman rank correlation with its two-sided significance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub rho: f64,
    /// Two-sided p-value from t = rho·sqrt((n-2)/(1-rho²)) on n-2 degrees of
    /// freedom; exactly 0 when |rho| == 1.
    pub p: f64,
    pub n: usize,
}

/// Quadratic OLS fit on standardized x.
///
/// `beta*`, `se*`, and `z_star` are all in standardized units (z has mean 0,
/// sample standard deviation 1). Use [`RegressionResult::raw_coefficients`]
/// and [`RegressionResult::peak_raw`] to map back to the original x scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub se1: f64,
    pub se2: f64,
    /// Two-sided p-value for beta1, t distribution with n-3 degrees of freedom.
    pub p1: f64,
    /// Two-sided p-value for beta2, same distribution.
    pub p2: f64,
    pub r2_lin: f64,
    pub r2_quad: f64,
    /// r2_quad - r2_lin, clamped at 0 against rounding.
    pub delta_r2: f64,
    /// Vertex -beta1/(2·beta2) in standardized units; `None` when beta2 == 0.
    pub z_star: Option<f64>,
    pub n: usize,
    pub x_mean: f64,
    pub x_std: f64,
}

impl RegressionResult {
    /// Coefficients of the same parabola expressed in raw x units:
    /// y = c0 + c1·x + c2·x².
    pub fn raw_coefficients(&self) -> (f64, f64, f64) {
        let (m, s) = (self.x_mean, self.x_std);
        let c2 = self.beta2 / (s * s);
        let c1 = self.beta1 / s - 2.0 * self.beta2 * m / (s * s);
        let c0 = self.beta0 - self.beta1 * m / s + self.beta2 * m * m / (s * s);
        (c0, c1, c2)
    }

    /// Vertex location in raw x units.
    pub fn peak_raw(&self) -> Option<f64> {
        self.z_star.map(|z| self.x_mean + self.x_std * z)
    }
}

/// Shape of the fitted quality-vs-uncertainty curve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    /// Significant concavity with the peak inside the range window.
    SweetSpot,
    /// Significant concavity peaking outside the window: quality still rising
    /// (or falling) at the edge of the observed range, but decelerating.
    Diminishing,
    /// Significant convexity with the trough inside the window.
    UShape,
    /// Significant linear term, no significant curvature.
    Linear,
    /// No significant relationship detected.
    FlatNs,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [
        ShapeClass::SweetSpot,
        ShapeClass::Diminishing,
        ShapeClass::UShape,
        ShapeClass::Linear,
        ShapeClass::FlatNs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeClass::SweetSpot => "sweet_spot",
            ShapeClass::Diminishing => "diminishing",
            ShapeClass::UShape => "u_shape",
            ShapeClass::Linear => "linear",
            ShapeClass::FlatNs => "flat_ns",
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShapeClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ShapeClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown shape class {s:?}"))
    }
}

/// Average ranks, 1-based; tied values share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // positions i..=j are one tie run; mean of 1-based ranks i+1..=j+1
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = shared;
        }
        i = j + 1;
    }
    ranks
}

fn check_paired(xs: &[f64], ys: &[f64], min_n: usize) -> Result<(), QualityError> {
    if xs.len() != ys.len() {
        return Err(QualityError::MismatchedLengths {
            x: xs.len(),
            y: ys.len(),
        });
    }
    if xs.len() < min_n {
        return Err(QualityError::TooFewPoints {
            needed: min_n,
            got: xs.len(),
        });
    }
    if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
        return Err(QualityError::NonFinite);
    }
    Ok(())
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, QualityError> {
    let mx = stats::mean(xs);
    let my = stats::mean(ys);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 {
        return Err(QualityError::ConstantInput { what: "xs" });
    }
    if syy == 0.0 {
        return Err(QualityError::ConstantInput { what: "ys" });
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Tie-corrected Spearman rank correlation: Pearson correlation of average
/// ranks, with a two-sided p-value from the t distribution on n-2 degrees of
/// freedom. Constant input has no defined correlation and is an error.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<SpearmanResult, QualityError> {
    check_paired(xs, ys, 3)?;
    let n = xs.len();
    let rho = pearson(&average_ranks(xs), &average_ranks(ys))?;
    let p = if (1.0 - rho * rho) <= 0.0 {
        0.0
    } else {
        let t = rho * ((n as f64 - 2.0) / (1.0 - rho * rho)).sqrt();
        stats::t_two_sided_p(t, n as f64 - 2.0)
    };
    Ok(SpearmanResult { rho, p, n })
}

/// Solve a 3×3 linear system by Gaussian elimination with partial pivoting.
/// Returns `None` when a pivot vanishes (singular system).
// index loops: elimination updates one row from another in place
#[allow(clippy::needless_range_loop)]
fn solve3(mut m: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&a, &c| m[a][col].abs().total_cmp(&m[c][col].abs()))
            .unwrap();
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= f * m[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut acc = b[row];
        for k in row + 1..3 {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    Some(x)
}

/// p-value for a single coefficient. An exact-fit regression has zero
/// residual variance; there a vanishing coefficient (at machine scale
/// relative to the others) is arithmetic noise, not a detected effect.
fn coefficient_p(beta: f64, se: f64, df: f64, scale: f64) -> f64 {
    if se == 0.0 {
        return if beta.abs() <= 1e-10 * scale { 1.0 } else { 0.0 };
    }
    stats::t_two_sided_p(beta / se, df)
}

/// Quadratic ordinary least squares with internal standardization.
///
/// x is mapped to z = (x - mean)/std (sample std, n-1 denominator) and
/// y = b0 + b1·z + b2·z² is fitted by solving the normal equations. Standard
/// errors come from the unbiased residual variance RSS/(n-3) and the inverse
/// normal matrix; `r2_lin` comes from the nested fit y = a0 + a1·z on the
/// same z.
pub fn fit_quadratic(xs: &[f64], ys: &[f64]) -> Result<RegressionResult, QualityError> {
    check_paired(xs, ys, 4)?;
    let n = xs.len();
    let mut distinct: Vec<f64> = xs.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(QualityError::RankDeficient {
            reason: format!("{} distinct x values, need at least 3", distinct.len()),
        });
    }

    let x_mean = stats::mean(xs);
    let x_std = stats::sample_std(xs);
    let z: Vec<f64> = xs.iter().map(|x| (x - x_mean) / x_std).collect();

    // power sums of z drive both the quadratic and the nested linear fit
    let (mut s1, mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0, 0.0);
    let (mut sy, mut szy, mut szzy) = (0.0, 0.0, 0.0);
    for (zi, yi) in z.iter().zip(ys) {
        let z2 = zi * zi;
        s1 += zi;
        s2 += z2;
        s3 += z2 * zi;
        s4 += z2 * z2;
        sy += yi;
        szy += zi * yi;
        szzy += z2 * yi;
    }
    let nf = n as f64;
    let normal = [[nf, s1, s2], [s1, s2, s3], [s2, s3, s4]];
    let beta = solve3(normal, [sy, szy, szzy]).ok_or_else(|| QualityError::RankDeficient {
        reason: "singular normal matrix".into(),
    })?;

    let y_mean = sy / nf;
    let mut rss = 0.0;
    let mut tss = 0.0;
    for (zi, yi) in z.iter().zip(ys) {
        let fitted = beta[0] + beta[1] * zi + beta[2] * zi * zi;
        rss += (yi - fitted) * (yi - fitted);
        tss += (yi - y_mean) * (yi - y_mean);
    }

    // nested linear fit shares the centered-z moments
    let lin_den = nf * s2 - s1 * s1;
    let a1 = (nf * szy - s1 * sy) / lin_den;
    let a0 = (sy - a1 * s1) / nf;
    let mut rss_lin = 0.0;
    for (zi, yi) in z.iter().zip(ys) {
        let fitted = a0 + a1 * zi;
        rss_lin += (yi - fitted) * (yi - fitted);
    }

    let r2_of = |rss: f64| if tss == 0.0 { 0.0 } else { (1.0 - rss / tss).max(0.0) };
    let r2_lin = r2_of(rss_lin);
    let r2_quad = r2_of(rss).max(r2_lin);
    let delta_r2 = r2_quad - r2_lin;

    // An exact fit leaves residuals that are pure rounding noise relative to
    // the data's own scale; a t-ratio of coefficient noise over residual
    // noise would manufacture significance out of nothing.
    let sy2: f64 = ys.iter().map(|y| y * y).sum();
    let exact_fit = rss <= 1e-24 * tss.max(sy2);
    let df = nf - 3.0;
    let sigma2 = if exact_fit { 0.0 } else { rss.max(0.0) / df };
    // diagonal of the inverse normal matrix via unit-vector solves
    let inv1 = solve3(normal, [0.0, 1.0, 0.0]).ok_or_else(|| QualityError::RankDeficient {
        reason: "singular normal matrix".into(),
    })?[1];
    let inv2 = solve3(normal, [0.0, 0.0, 1.0]).ok_or_else(|| QualityError::RankDeficient {
        reason: "singular normal matrix".into(),
    })?[2];
    let se1 = (sigma2 * inv1).sqrt();
    let se2 = (sigma2 * inv2).sqrt();

    let scale = beta.iter().fold(1.0f64, |m, b| m.max(b.abs()));
    let p1 = coefficient_p(beta[1], se1, df, scale);
    let p2 = coefficient_p(beta[2], se2, df, scale);
    let z_star = (beta[2] != 0.0).then(|| -beta[1] / (2.0 * beta[2]));

    Ok(RegressionResult {
        beta0: beta[0],
        beta1: beta[1],
        beta2: beta[2],
        se1,
        se2,
        p1,
        p2,
        r2_lin,
        r2_quad,
        delta_r2,
        z_star,
        n,
        x_mean,
        x_std,
    })
}

/// Five-way shape decision, checked in order so the classes partition every
/// possible fit:
///
/// 1. significant concavity, vertex within ±range_limit → `SweetSpot`
/// 2. significant concavity, vertex outside → `Diminishing`
/// 3. significant convexity, vertex within → `UShape`
/// 4. significant linear term without significant curvature → `Linear`
/// 5. anything else → `FlatNs`
pub fn classify_shape(reg: &RegressionResult, alpha: f64, range_limit: f64) -> ShapeClass {
    if reg.p2 < alpha && reg.beta2 < 0.0 {
        // beta2 != 0 here, so the vertex exists
        let z = reg.z_star.expect("nonzero beta2 has a vertex");
        return if z.abs() <= range_limit {
            ShapeClass::SweetSpot
        } else {
            ShapeClass::Diminishing
        };
    }
    if reg.p2 < alpha && reg.beta2 > 0.0 {
        let z = reg.z_star.expect("nonzero beta2 has a vertex");
        if z.abs() <= range_limit {
            return ShapeClass::UShape;
        }
    }
    if reg.p1 < alpha && reg.p2 >= alpha {
        return ShapeClass::Linear;
    }
    ShapeClass::FlatNs
}

#[cfg(test)]
// frozen reference values keep every digit of the oracle output
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    /// splitmix64; deterministic test-local randomness without a dependency.
    struct Rng(u64);

    impl Rng {
        fn next_u64(&mut self) -> u64 {
            self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
            let mut z = self.0;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
            z ^ (z >> 31)
        }

        fn uniform(&mut self) -> f64 {
            (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
        }
    }

    #[test]
    fn ranks_without_ties_are_positions() {
        assert_eq!(average_ranks(&[30.0, 10.0, 20.0]), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn tied_ranks_share_their_mean_position() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 20.0, 30.0]),
            vec![1.0, 2.5, 2.5, 4.0]
        );
        assert_eq!(average_ranks(&[5.0, 5.0, 5.0]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn monotone_series_correlate_perfectly() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let doubled: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        let up = spearman(&xs, &doubled).unwrap();
        assert_eq!(up.rho, 1.0);
        assert_eq!(up.p, 0.0);

        let reversed: Vec<f64> = xs.iter().rev().copied().collect();
        let down = spearman(&xs, &reversed).unwrap();
        assert_eq!(down.rho, -1.0);
        assert_eq!(down.p, 0.0);
    }

    #[test]
    fn tie_corrected_rho_matches_hand_computed_ranks() {
        // ranks of xs: [1, 2.5, 2.5, 4]; ranks of ys: [1, 3, 2, 4];
        // Pearson of those ranks is 4.5/sqrt(22.5)
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_close(r.rho, 4.5 / 22.5f64.sqrt(), 1e-15);
        assert_close(r.rho, 0.9486832980505138, 1e-15);
    }

    #[test]
    fn twelve_point_fixture_matches_reference_values() {
        let xs = [3.1, 1.2, 7.4, 1.2, 5.5, 9.9, 2.0, 5.5, 4.3, 8.8, 0.7, 6.1];
        let ys = [0.40, 0.21, 0.75, 0.35, 0.58, 0.88, 0.12, 0.66, 0.44, 0.71, 0.05, 0.69];
        let r = spearman(&xs, &ys).unwrap();
        assert_close(r.rho, 9.68427014035055267e-1, 1e-14);
        assert!((r.p / 2.34334998353574005e-7 - 1.0).abs() < 1e-9, "p = {}", r.p);
    }

    #[test]
    fn rho_is_invariant_under_increasing_transforms() {
        let xs = [0.3, 1.9, 0.2, 4.4, 2.8, 2.8, 0.9, 3.3];
        let ys = [2.0, 1.1, 3.5, 0.4, 1.8, 2.2, 2.9, 0.6];
        let base = spearman(&xs, &ys).unwrap();
        let ex: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        let cube: Vec<f64> = ys.iter().map(|y| y.powi(3) + 7.0).collect();
        let mapped = spearman(&ex, &cube).unwrap();
        assert_close(base.rho, mapped.rho, 1e-12);
        assert_close(base.p, mapped.p, 1e-12);
    }

    #[test]
    fn rho_equals_brute_force_rank_pearson() {
        let mut rng = Rng(41);
        for case in 0..60 {
            let n = 3 + (rng.next_u64() % 48) as usize;
            // coarse grid forces plenty of ties
            let xs: Vec<f64> = (0..n).map(|_| (rng.uniform() * 8.0).round()).collect();
            let ys: Vec<f64> = (0..n).map(|_| (rng.uniform() * 8.0).round()).collect();
            let ours = match spearman(&xs, &ys) {
                Ok(r) => r,
                Err(QualityError::ConstantInput { .. }) => continue,
                Err(e) => panic!("case {case}: {e}"),
            };
            let brute = pearson(&average_ranks(&xs), &average_ranks(&ys)).unwrap();
            assert_close(ours.rho, brute, 1e-12);
        }
    }

    #[test]
    fn constant_series_is_rejected() {
        let e = spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(e, QualityError::ConstantInput { what: "xs" }));
        let e = spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).unwrap_err();
        assert!(matches!(e, QualityError::ConstantInput { what: "ys" }));
        assert!(matches!(
            spearman(&[1.0, 2.0], &[1.0, 2.0]),
            Err(QualityError::TooFewPoints { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn noiseless_parabola_is_recovered_exactly() {
        let xs = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 + 0.2 * x - 0.1 * x * x).collect();
        let fit = fit_quadratic(&xs, &ys).unwrap();

        // standardized coefficients absorb the x scale: std = sqrt(2.5)
        assert_close(fit.beta1, 0.2 * 2.5f64.sqrt(), 1e-12);
        assert_close(fit.beta2, -0.25, 1e-12);
        let (c0, c1, c2) = fit.raw_coefficients();
        assert_close(c0, 1.0, 1e-10);
        assert_close(c1, 0.2, 1e-10);
        assert_close(c2, -0.1, 1e-10);
        assert!(fit.r2_quad >= 1.0 - 1e-10);
        assert_close(fit.peak_raw().unwrap(), 1.0, 1e-10);
        assert_eq!(
            classify_shape(&fit, DEFAULT_ALPHA, DEFAULT_RANGE_LIMIT),
            ShapeClass::SweetSpot
        );
    }

    #[test]
    fn ten_point_fixture_matches_reference_values() {
        let xs = [0.5, 1.3, 2.1, 2.9, 3.6, 4.4, 5.2, 6.0, 6.9, 7.7];
        let ys = [1.10, 1.95, 2.60, 2.94, 3.10, 3.05, 2.82, 2.35, 1.70, 0.85];
        let fit = fit_quadratic(&xs, &ys).unwrap();
        assert_close(fit.x_mean, 4.06, 1e-12);
        assert_close(fit.x_std, 2.407949796449715, 1e-12);
        assert_close(fit.beta0, 3.097901242736834, 1e-10);
        assert_close(fit.beta1, -0.080395282044537, 1e-10);
        assert_close(fit.beta2, -0.946556936374261, 1e-10);
        assert_close(fit.se1, 0.015278990691958, 1e-10);
        assert_close(fit.se2, 0.017942193832119, 1e-10);
        assert!((fit.p1 / 1.171017777927274572e-3 - 1.0).abs() < 1e-9);
        assert!((fit.p2 / 2.304001421434527299e-10 - 1.0).abs() < 1e-9);
        assert_close(fit.r2_lin, 0.020020410236727, 1e-10);
        assert_close(fit.r2_quad, 0.997541434684398, 1e-10);
        assert_close(fit.delta_r2, 0.977521024447671, 1e-10);
        assert_close(fit.z_star.unwrap(), -0.042467219326757, 1e-10);
        assert_close(fit.peak_raw().unwrap(), 3.957741067866352, 1e-10);
        assert_eq!(fit.n, 10);
        assert_eq!(
            classify_shape(&fit, DEFAULT_ALPHA, DEFAULT_RANGE_LIMIT),
            ShapeClass::SweetSpot
        );
    }

    #[test]
    fn constant_y_fits_flat_with_zero_r2() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ys = [4.0; 5];
        let fit = fit_quadratic(&xs, &ys).unwrap();
        assert_close(fit.beta0, 4.0, 1e-12);
        assert_close(fit.beta1, 0.0, 1e-12);
        assert_close(fit.beta2, 0.0, 1e-12);
        assert_eq!(fit.r2_lin, 0.0);
        assert_eq!(fit.r2_quad, 0.0);
        assert_eq!(fit.delta_r2, 0.0);
    }

    #[test]
    fn linear_data_adds_no_curvature() {
        let xs: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 - 0.5 * x).collect();
        let fit = fit_quadratic(&xs, &ys).unwrap();
        assert!(fit.beta2.abs() < 1e-10);
        assert!(fit.delta_r2 <= 1e-10);
        assert!(fit.r2_quad >= fit.r2_lin);
        assert_eq!(
            classify_shape(&fit, DEFAULT_ALPHA, DEFAULT_RANGE_LIMIT),
            ShapeClass::Linear
        );
    }

    #[test]
    fn noisy_linear_trend_classifies_linear() {
        let mut rng = Rng(7);
        let xs: Vec<f64> = (0..80).map(|i| i as f64 / 10.0).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| 2.0 + 0.8 * x + 0.3 * (rng.uniform() - 0.5))
            .collect();
        let fit = fit_quadratic(&xs, &ys).unwrap();
        assert_eq!(
            classify_shape(&fit, DEFAULT_ALPHA, DEFAULT_RANGE_LIMIT),
            ShapeClass::Linear
        );
    }

    #[test]
    fn rank_deficient_designs_are_rejected() {
        assert!(matches!(
            fit_quadratic(&[1.0, 1.0, 2.0, 2.0], &[0.0, 0.1, 0.2, 0.3]),
            Err(QualityError::RankDeficient { .. })
        ));
        assert!(matches!(
            fit_quadratic(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]),
            Err(QualityError::TooFewPoints { needed: 4, got: 3 })
        ));
    }

    #[test]
    fn positive_affine_rescaling_never_changes_the_class() {
        let mut rng = Rng(99);
        for _ in 0..20 {
            let xs: Vec<f64> = (0..30).map(|_| rng.uniform() * 6.0 - 3.0).collect();
            let ys: Vec<f64> = xs
                .iter()
                .map(|x| 0.4 * x - 0.2 * x * x + 0.2 * (rng.uniform() - 0.5))
                .collect();
            let scaled: Vec<f64> = xs.iter().map(|x| 7.3 * x + 11.0).collect();
            let a = fit_quadratic(&xs, &ys).unwrap();
            let b = fit_quadratic(&scaled, &ys).unwrap();
            // standardization makes the fits identical up to rounding
            assert_close(a.beta1, b.beta1, 1e-9);
            assert_close(a.beta2, b.beta2, 1e-9);
            assert_close(a.p2, b.p2, 1e-9);
            assert_eq!(
                classify_shape(&a, DEFAULT_ALPHA, DEFAULT_RANGE_LIMIT),
                classify_shape(&b, DEFAULT_ALPHA, DEFAULT_RANGE_LIMIT)
            );
        }
    }

    fn fit_with(p1: f64, p2: f64, beta1: f64, beta2: f64) -> RegressionResult {
        RegressionResult {
            beta0: 0.0,
            beta1,
            beta2,
            se1: 0.1,
            se2: 0.1,
            p1,
            p2,
            r2_lin: 0.1,
            r2_quad: 0.2,
            delta_r2: 0.1,
            z_star: (beta2 != 0.0).then(|| -beta1 / (2.0 * beta2)),
            n: 20,
            x_mean: 0.0,
            x_std: 1.0,
        }
    }

    #[test]
    fn shape_rules_follow_the_decision_order() {
        // concave, significant, vertex at 1.0 → interior peak
        let f = fit_with(0.5, 0.01, 0.1, -0.05);
        assert_eq!(f.z_star.unwrap(), 1.0);
        assert_eq!(classify_shape(&f, 0.05, 2.5), ShapeClass::SweetSpot);

        // same curvature, vertex at 4.0 → peak beyond the window
        let f = fit_with(0.5, 0.01, 0.4, -0.05);
        assert_eq!(f.z_star.unwrap(), 4.0);
        assert_eq!(classify_shape(&f, 0.05, 2.5), ShapeClass::Diminishing);

        // convex, significant, trough inside the window
        let f = fit_with(0.5, 0.01, -0.1, 0.05);
        assert_eq!(classify_shape(&f, 0.05, 2.5), ShapeClass::UShape);

        // significant slope, curvature not significant
        let f = fit_with(0.01, 0.3, 0.5, 0.01);
        assert_eq!(classify_shape(&f, 0.05, 2.5), ShapeClass::Linear);

        // nothing significant
        let f = fit_with(0.4, 0.6, 0.1, 0.01);
        assert_eq!(classify_shape(&f, 0.05, 2.5), ShapeClass::FlatNs);
    }

    #[test]
    fn every_fit_lands_in_exactly_one_class() {
        let mut rng = Rng(3);
        for _ in 0..200 {
            let f = fit_with(
                rng.uniform(),
                rng.uniform(),
                rng.uniform() - 0.5,
                rng.uniform() - 0.5,
            );
            let class = classify_shape(&f, 0.05, 2.5);
            let hits = ShapeClass::ALL.iter().filter(|&&c| c == class).count();
            assert_eq!(hits, 1);
        }
    }

    #[test]
    fn shape_class_round_trips_through_strings() {
        for class in ShapeClass::ALL {
            assert_eq!(class.as_str().parse::<ShapeClass>().unwrap(), class);
            let json = serde_json::to_string(&class).unwrap();
            assert_eq!(json, format!("\"{class}\""));
            assert_eq!(serde_json::from_str::<ShapeClass>(&json).unwrap(), class);
        }
        assert!("banana".parse::<ShapeClass>().is_err());
    }
}
