//! Error function, its inverse, and normal-distribution helpers.
//!
//! `erf` is evaluated by the alternating Maclaurin series for small arguments
//! and via the complementary continued fraction for large ones; `erf_inv` is
//! a bisection on `erf` to 1e-12. Both are hand-rolled so every consumer of
//! the chance-constraint machinery sees exactly the same fixed-accuracy
//! values.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

const FRAC_2_SQRT_PI: f64 = 1.1283791670955126; // 2/sqrt(pi)
const SERIES_CUTOFF: f64 = 2.5;

/// Gauss error function.
pub fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x > SERIES_CUTOFF {
        return 1.0 - erfc_cf(x);
    }
    // erf(x) = 2/sqrt(pi) * sum_{n>=0} (-1)^n x^(2n+1) / (n! (2n+1))
    let x2 = x * x;
    let mut num = x; // (-1)^n x^(2n+1) / n!
    let mut sum = x;
    let mut n = 1.0f64;
    loop {
        num *= -x2 / n;
        let term = num / (2.0 * n + 1.0);
        sum += term;
        if term.abs() < 1e-17 * sum.abs().max(1e-300) {
            break;
        }
        n += 1.0;
    }
    FRAC_2_SQRT_PI * sum
}

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    if x > SERIES_CUTOFF {
        erfc_cf(x)
    } else if x < -SERIES_CUTOFF {
        2.0 - erfc_cf(-x)
    } else {
        1.0 - erf(x)
    }
}

/// erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
/// for x > 0, evaluated with the modified Lentz scheme.
fn erfc_cf(x: f64) -> f64 {
    let tiny = 1e-300;
    let mut f = x.max(tiny);
    let mut c = f;
    let mut d = 0.0f64;
    for k in 1..200 {
        let a = k as f64 / 2.0;
        d = x + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = x + a / c;
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
    (-x * x).exp() / (std::f64::consts::PI).sqrt() / f
}

/// Inverse error function by bisection on [`erf`].
///
/// Defined on (-1, 1); the boundary values map to signed infinity so callers
/// see an honestly infeasible constraint rather than a silently clamped one.
pub fn erf_inv(y: f64) -> f64 {
    assert!((-1.0..=1.0).contains(&y), "erf_inv argument {y} outside [-1, 1]");
    if y == 0.0 {
        return 0.0;
    }
    if y == 1.0 {
        return f64::INFINITY;
    }
    if y == -1.0 {
        return f64::NEG_INFINITY;
    }
    let target = y.abs();
    let (mut lo, mut hi) = (0.0f64, 6.0f64);
    // erf(6) == 1 to double precision, so the root is bracketed
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if erf(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    let root = 0.5 * (lo + hi);
    if y < 0.0 {
        -root
    } else {
        root
    }
}

/// Standard normal CDF, Phi(x) = (1 + erf(x / sqrt(2))) / 2.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Symmetric square root of a PSD matrix via eigendecomposition, with small
/// negative eigenvalues (numerical noise) clamped to zero. Used to turn load
/// covariances into sampling factors.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let n = m.nrows();
    let mut scaled = eig.eigenvectors.clone();
    for j in 0..n {
        let lambda = eig.eigenvalues[j].max(0.0);
        let s = lambda.sqrt();
        for i in 0..n {
            scaled[(i, j)] *= s;
        }
    }
    &scaled * eig.eigenvectors.transpose()
}

/// Draw `mean + sqrt_cov * w` with `w` i.i.d. standard normal.
pub fn sample_mvn<R: Rng>(
    mean: &DVector<f64>,
    sqrt_cov: &DMatrix<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let n = mean.len();
    let w = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    mean + sqrt_cov * w
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn erf_reference_values() {
        // reference values to 16 digits
        assert_abs_diff_eq!(erf(0.5), 0.5204998778130465, epsilon = 1e-14);
        assert_abs_diff_eq!(erf(1.0), 0.8427007929497149, epsilon = 1e-14);
        assert_abs_diff_eq!(erf(2.0), 0.9953222650189527, epsilon = 1e-14);
        assert_abs_diff_eq!(erf(3.0), 0.9999779095030014, epsilon = 1e-14);
        assert_abs_diff_eq!(erf(-1.0), -0.8427007929497149, epsilon = 1e-14);
        assert_eq!(erf(0.0), 0.0);
    }

    #[test]
    fn erfc_matches_complement() {
        for &x in &[0.1, 0.9, 1.7, 2.4, 2.6, 3.5, 5.0] {
            assert_abs_diff_eq!(erfc(x), 1.0 - erf(x), epsilon = 1e-13);
            assert_abs_diff_eq!(erfc(-x), 2.0 - erfc(x), epsilon = 1e-13);
        }
    }

    #[test]
    fn erf_inv_round_trips() {
        for i in 1..40 {
            let x = -2.0 + 4.0 * i as f64 / 40.0;
            let y = erf(x);
            assert_abs_diff_eq!(erf_inv(y), x, epsilon = 1e-11);
        }
        assert_eq!(erf_inv(0.0), 0.0);
        assert_eq!(erf_inv(1.0), f64::INFINITY);
        assert_eq!(erf_inv(-1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn cdf_erf_relation() {
        assert_abs_diff_eq!(normal_cdf(0.0), 0.5, epsilon = 1e-15);
        // P(Z <= 1) for the standard normal
        assert_abs_diff_eq!(normal_cdf(1.0), 0.8413447460685429, epsilon = 1e-13);
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let m = nalgebra::dmatrix![4.0, 1.0; 1.0, 2.0];
        let s = psd_sqrt(&m);
        assert!((&s * &s - &m).amax() < 1e-12);
    }
}
