//! Closed-form error bounds, evaluated exactly for comparison against Monte
//! Carlo estimates.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::linalg::mat_pow;
use crate::task::{gamma_single_eigenvalues, hardness, CovarianceSpec, GammaMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundName {
    Direct,
    CotLeading,
    Corollary,
    Multitask,
}

impl BoundName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::CotLeading => "cot_leading",
            Self::Corollary => "corollary",
            Self::Multitask => "multitask",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: BoundName,
    pub value: f64,
    pub d: usize,
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub k: Option<usize>,
    pub hardness: Option<f64>,
}

fn full_rank_hardness(cov: &CovarianceSpec) -> Result<f64> {
    if !(cov.min_eigenvalue() > 0.0) {
        return Err(Error::Domain(format!(
            "bound requires a nonsingular covariance, smallest eigenvalue is {:e}",
            cov.min_eigenvalue()
        )));
    }
    hardness(cov)
}

/// One-step estimate: `(d/n²)(1 + H)² + (d/m)(1 + H)`.
pub fn bound_direct(cov: &CovarianceSpec, n: usize, m: usize) -> Result<BoundReport> {
    if n == 0 || m == 0 {
        return Err(Error::Domain("n and m must be positive".into()));
    }
    let h = full_rank_hardness(cov)?;
    let d = cov.dim() as f64;
    let (nf, mf) = (n as f64, m as f64);
    let value = d / (nf * nf) * (1.0 + h).powi(2) + d / mf * (1.0 + h);
    Ok(BoundReport { name: BoundName::Direct, value, d: cov.dim(), n: Some(n), m: Some(m), k: None, hardness: Some(h) })
}

/// Leading term `tr((I − Γ⁻¹Λ)^{2k})`. In the shared eigenbasis each factor is
/// `(λ_i + tr Λ) / ((n+1)λ_i + tr Λ)`.
pub fn bound_cot_leading(cov: &CovarianceSpec, n: usize, k: usize) -> Result<BoundReport> {
    let h = full_rank_hardness(cov)?;
    let value = cot_leading_value(cov, n, k);
    Ok(BoundReport {
        name: BoundName::CotLeading,
        value,
        d: cov.dim(),
        n: Some(n),
        m: None,
        k: Some(k),
        hardness: Some(h),
    })
}

fn cot_leading_value(cov: &CovarianceSpec, n: usize, k: usize) -> f64 {
    cov.full_eigenvalues()
        .into_iter()
        .zip(gamma_single_eigenvalues(cov, n))
        .map(|(l, g)| (1.0 - l / g).powi(2 * k as i32))
        .sum()
}

/// `d (1 + n/(1 + H))^{−2k}`.
pub fn bound_corollary(cov: &CovarianceSpec, n: usize, k: usize) -> Result<BoundReport> {
    let h = full_rank_hardness(cov)?;
    let d = cov.dim() as f64;
    let value = d * (1.0 + n as f64 / (1.0 + h)).powi(-2 * k as i32);
    Ok(BoundReport {
        name: BoundName::Corollary,
        value,
        d: cov.dim(),
        n: Some(n),
        m: None,
        k: Some(k),
        hardness: Some(h),
    })
}

/// `tr((I − Γ^{-1/2} Σ Γ^{-1/2})^{2k})`, computed as `tr((I − Γ⁻¹Σ)^{2k})`.
/// The two matrices are similar whenever `Γ` is SPD, and the second form stays
/// well defined for the non-symmetric multi-task `Γ`.
pub fn mismatch_trace(gamma: &GammaMatrix, target: &DMatrix<f64>, k: usize) -> Result<f64> {
    let d = gamma.dim;
    check_dims("mismatch trace", d, target.nrows(), target.shape() == (d, d))?;
    let op = DMatrix::identity(d, d) - gamma.inverse()? * target;
    Ok(mat_pow(&op, 2 * k as u64).trace())
}

/// `tr(Γ) tr(Γ⁻¹) tr((I − Γ^{-1/2} Σ Γ^{-1/2})^{2k})`.
pub fn bound_multitask(gamma: &GammaMatrix, target: &CovarianceSpec, k: usize) -> Result<BoundReport> {
    check_dims("bound_multitask", gamma.dim, target.dim(), gamma.dim == target.dim())?;
    let value = gamma.matrix.trace() * gamma.inverse()?.trace() * mismatch_trace(gamma, &target.matrix(), k)?;
    Ok(BoundReport {
        name: BoundName::Multitask,
        value,
        d: gamma.dim,
        n: Some(gamma.n()),
        m: None,
        k: Some(k),
        hardness: hardness(target).ok(),
    })
}

/// One row of a bound-versus-Monte-Carlo grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub bound_name: BoundName,
    pub d: usize,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub hardness: f64,
    pub bound: f64,
    pub mc_mean: f64,
    pub mc_se: f64,
}

/// CSV with header `bound_name,d,n,m,k,hardness,bound,mc_mean,mc_se`.
pub fn write_bound_grid_csv<W: Write>(rows: &[BoundRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
