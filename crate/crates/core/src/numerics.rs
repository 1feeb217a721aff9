//! Dense linear-algebra helpers, Gaussian densities and chi-squared quantiles.
//!
//! Matrices and vectors are `nalgebra` dynamic types in double precision.
//! Covariance-producing code calls [`symmetrize`] after every update.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Replaces `m` with `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut Mat) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn symmetrized(mut m: Mat) -> Mat {
    symmetrize(&mut m);
    m
}

fn factor(m: &Mat) -> Result<Cholesky<f64, Dyn>> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "expected square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite);
    }
    Cholesky::new(symmetrized(m.clone())).ok_or(Error::NotPositiveDefinite)
}

/// Inverse of a symmetric positive-definite matrix through its Cholesky factor.
pub fn spd_inverse(m: &Mat) -> Result<Mat> {
    Ok(symmetrized(factor(m)?.inverse()))
}

/// `log det` of an SPD matrix.
pub fn spd_logdet(m: &Mat) -> Result<f64> {
    let chol = factor(m)?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Squared Mahalanobis distance `dᵀ m⁻¹ d`, solved through the factor.
pub fn mahalanobis_sq(d: &Vector, m: &Mat) -> Result<f64> {
    if d.len() != m.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "vector of length {} against {}x{} matrix",
            d.len(),
            m.nrows(),
            m.ncols()
        )));
    }
    let chol = factor(m)?;
    let y = chol
        .l()
        .solve_lower_triangular(d)
        .ok_or(Error::NotPositiveDefinite)?;
    Ok(y.norm_squared())
}

/// `log N(x; mean, cov)`.
pub fn gaussian_logpdf(x: &Vector, mean: &Vector, cov: &Mat) -> Result<f64> {
    if x.len() != mean.len() || x.len() != cov.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "x has {} entries, mean {}, cov {}x{}",
            x.len(),
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    let chol = factor(cov)?;
    let diff = x - mean;
    let y = chol
        .l()
        .solve_lower_triangular(&diff)
        .ok_or(Error::NotPositiveDefinite)?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * (x.len() as f64 * LN_2PI + logdet + y.norm_squared()))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &Mat) -> f64 {
    SymmetricEigen::new(symmetrized(m.clone()))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn is_psd(m: &Mat, tol: f64) -> bool {
    min_eigenvalue(m) >= -tol
}

/// Block-diagonal matrix from square blocks.
pub fn block_diag(blocks: &[&Mat]) -> Mat {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Mat::zeros(n, n);
    let mut off = 0;
    for b in blocks {
        let k = b.nrows();
        out.view_mut((off, off), (k, k)).copy_from(*b);
        off += k;
    }
    out
}

/// Numerically stable `log Σ exp(v)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

// ---------------------------------------------------------------------------
// Chi-squared distribution
// ---------------------------------------------------------------------------

/// Lanczos approximation (g = 7, n = 9) of `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        gamma_p_series(a, x)
    } else {
        1.0 - gamma_q_continued_fraction(a, x)
    }
}

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..10_000 {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * 1e-17 {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn gamma_q_continued_fraction(a: f64, x: f64) -> f64 {
    // modified Lentz
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..10_000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

pub fn chi2_cdf(x: f64, dof: usize) -> f64 {
    gamma_p(0.5 * dof as f64, 0.5 * x)
}

/// Quantile of χ²(dof) by bisection on [`chi2_cdf`].
pub fn chi2_quantile(p: f64, dof: usize) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0 && dof >= 1);
    let mut lo = 0.0;
    let mut hi = dof as f64 + 10.0;
    while chi2_cdf(hi, dof) < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(mid, dof) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Two-sided equal-tail interval holding `confidence` of the χ²(dof) mass.
pub fn chi2_interval(dof: usize, confidence: f64) -> Result<(f64, f64)> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidConfidence(confidence));
    }
    if dof == 0 {
        return Err(Error::DimensionMismatch("chi-squared needs dof >= 1".into()));
    }
    let tail = 0.5 * (1.0 - confidence);
    Ok((chi2_quantile(tail, dof), chi2_quantile(1.0 - tail, dof)))
}
