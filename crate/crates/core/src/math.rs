//! Special functions and positive-definite matrix primitives.

use nalgebra::{DMatrix, DVector};

use crate::error::{HemfError, Result};

const LN_2: f64 = std::f64::consts::LN_2;
const LN_PI: f64 = 1.144_729_885_849_400_2;

/// Below this the upward recurrence is applied before the asymptotic series.
const ASYMPTOTIC_FROM: f64 = 10.0;

/// Digamma function ψ(x) for x > 0.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(HemfError::Domain(format!("digamma requires x > 0, got {x}")));
    }
    Ok(digamma_pos(x))
}

/// ψ(x) without the domain check. Callers guarantee x > 0.
pub(crate) fn digamma_pos(mut x: f64) -> f64 {
    let mut shift = 0.0;
    while x < ASYMPTOTIC_FROM {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli-number tail: B_2k / (2k x^2k), k = 1..7
    let tail = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    shift + x.ln() - 0.5 * inv - tail
}

/// Σ_{i=1..p} ψ(x + (1 − i)/2), defined for x > (p − 1)/2.
pub fn multivariate_digamma(x: f64, p: usize) -> Result<f64> {
    if p == 0 {
        return Err(HemfError::Domain("multivariate digamma needs p >= 1".into()));
    }
    let lower = (p as f64 - 1.0) / 2.0;
    if !(x > lower) || !x.is_finite() {
        return Err(HemfError::Domain(format!(
            "multivariate digamma of order {p} requires x > {lower}, got {x}"
        )));
    }
    Ok((0..p).map(|i| digamma_pos(x - i as f64 / 2.0)).sum())
}

pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// ln Γ_p(x), the log multivariate gamma function.
pub fn ln_multivariate_gamma(x: f64, p: usize) -> f64 {
    let pf = p as f64;
    pf * (pf - 1.0) / 4.0 * LN_PI + (0..p).map(|i| ln_gamma(x - i as f64 / 2.0)).sum::<f64>()
}

/// ln B(a, b).
pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Entropy of Beta(a, b).
pub fn beta_entropy(a: f64, b: f64) -> f64 {
    ln_beta(a, b) - (a - 1.0) * digamma_pos(a) - (b - 1.0) * digamma_pos(b)
        + (a + b - 2.0) * digamma_pos(a + b)
}

/// ⟨ln|Σ|⟩ for Σ ~ inverse-Wishart(W, ι), given ln|W|.
pub fn inverse_wishart_expected_logdet(scale_logdet: f64, dof: f64, dim: usize) -> f64 {
    let psi: f64 = (1..=dim)
        .map(|i| digamma_pos((dof + 1.0 - i as f64) / 2.0))
        .sum();
    scale_logdet - psi - dim as f64 * LN_2
}

/// A symmetric positive-definite matrix.
///
/// Construction checks symmetry and runs a Cholesky factorization; failures are
/// reported, never regularized away.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricPd(DMatrix<f64>);

impl SymmetricPd {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(HemfError::DimensionMismatch(format!(
                "expected a non-empty square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = m.amax().max(1.0);
        for i in 0..m.nrows() {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                    return Err(HemfError::NotPositiveDefinite(format!(
                        "matrix not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(HemfError::NotPositiveDefinite("non-finite entry".into()));
        }
        if m.clone().cholesky().is_none() {
            return Err(HemfError::NotPositiveDefinite(
                "Cholesky factorization failed".into(),
            ));
        }
        Ok(SymmetricPd(m))
    }

    /// Averages `m` with its transpose before validating.
    pub fn symmetrized(m: DMatrix<f64>) -> Result<Self> {
        Self::new(symmetrize(m))
    }

    pub fn identity(dim: usize) -> Self {
        SymmetricPd(DMatrix::identity(dim, dim))
    }

    pub fn scaled_identity(dim: usize, scale: f64) -> Result<Self> {
        Self::new(DMatrix::identity(dim, dim) * scale)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn inverse_logdet(&self) -> Result<(SymmetricPd, f64)> {
        pd_inverse_logdet(self)
    }
}

/// Inverse and log-determinant of a positive-definite matrix.
pub fn pd_inverse_logdet(m: &SymmetricPd) -> Result<(SymmetricPd, f64)> {
    let (inv, logdet) = cholesky_inverse_logdet(m.as_matrix())?;
    Ok((SymmetricPd(inv), logdet))
}

/// Cholesky-based inverse and ln-determinant of a raw matrix assumed symmetric.
pub(crate) fn cholesky_inverse_logdet(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| HemfError::NotPositiveDefinite("Cholesky factorization failed".into()))?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let inv = symmetrize(chol.inverse());
    Ok((inv, logdet))
}

/// Inverse of `m` together with the solution of `m x = b`, from one factorization.
pub(crate) fn pd_inverse_and_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| HemfError::NotPositiveDefinite("Cholesky factorization failed".into()))?;
    let x = chol.solve(b);
    Ok((symmetrize(chol.inverse()), x))
}

/// Solves `m x = b` for symmetric positive-definite `m`.
pub(crate) fn pd_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| HemfError::NotPositiveDefinite("Cholesky factorization failed".into()))?;
    Ok(chol.solve(b))
}

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// tr(A B) for square matrices of equal size, without forming the product.
pub(crate) fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.transpose().iter()).map(|(x, y)| x * y).sum()
}

/// x yᵀ + y xᵀ
pub(crate) fn sym_outer(x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
    let xy = x * y.transpose();
    let yx = xy.transpose();
    xy + yx
}
