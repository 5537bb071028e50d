//! Task covariances, the hardness measure, the Γ preconditioner and the
//! fourth-moment identities of the sample covariance `XXᵀ/n`.
//!
//! A task is identified with the covariance `Λ` of its Gaussian features.
//! Covariances are stored in eigen-form (descending eigenvalues plus an
//! orthonormal basis). A spec may be *thin*: it stores only `r < d` eigenpairs
//! and every direction outside its frame has eigenvalue zero.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::linalg::{self, max_abs, sym_eigen};
use crate::rng;

const ORTHONORMAL_TOL: f64 = 1e-10;
/// Eigenvalues at or below this fraction of the largest one count as zero.
pub const ZERO_EIGEN_REL: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub enum BasisChoice {
    Identity,
    /// Haar-random orthogonal basis drawn from this seed.
    Seed(u64),
    /// Columns are eigenvectors; may have fewer columns than rows (thin frame).
    Explicit(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSpec {
    dim: usize,
    eigenvalues: Vec<f64>,
    basis: DMatrix<f64>,
    basis_seed: Option<u64>,
    pub label: String,
}

/// Builds a covariance from its spectrum. Eigenvalues are re-sorted descending
/// and an explicit basis has its columns permuted to match.
pub fn make_covariance(eigenvalues: &[f64], basis: BasisChoice) -> Result<CovarianceSpec> {
    if eigenvalues.is_empty() {
        return Err(Error::Domain("covariance needs at least one eigenvalue".into()));
    }
    if let Some(bad) = eigenvalues.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("eigenvalue {bad} is negative or not finite")));
    }
    let mut order: Vec<usize> = (0..eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]));
    let sorted: Vec<f64> = order.iter().map(|&i| eigenvalues[i]).collect();

    let (dim, basis, basis_seed) = match basis {
        BasisChoice::Identity => {
            let d = eigenvalues.len();
            let m = DMatrix::from_fn(d, d, |r, c| if r == order[c] { 1.0 } else { 0.0 });
            (d, m, None)
        }
        BasisChoice::Seed(seed) => {
            let d = eigenvalues.len();
            let mut rng = rng::stream(seed, 0);
            (d, linalg::haar_orthogonal(d, &mut rng), Some(seed))
        }
        BasisChoice::Explicit(b) => {
            check_dims(
                "make_covariance basis",
                format!("{} columns", eigenvalues.len()),
                format!("{} columns", b.ncols()),
                b.ncols() == eigenvalues.len() && b.nrows() >= b.ncols(),
            )?;
            let m = DMatrix::from_fn(b.nrows(), b.ncols(), |r, c| b[(r, order[c])]);
            (b.nrows(), m, None)
        }
    };
    let err = max_abs(&(basis.transpose() * &basis - DMatrix::identity(basis.ncols(), basis.ncols())));
    if err > ORTHONORMAL_TOL {
        return Err(Error::Domain(format!("basis is not orthonormal (max deviation {err:e})")));
    }
    Ok(CovarianceSpec { dim, eigenvalues: sorted, basis, basis_seed, label: String::new() })
}

impl CovarianceSpec {
    pub fn identity(dim: usize) -> Self {
        make_covariance(&vec![1.0; dim], BasisChoice::Identity).expect("identity is valid")
    }

    pub fn diagonal(eigenvalues: &[f64]) -> Result<Self> {
        make_covariance(eigenvalues, BasisChoice::Identity)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Stored eigenvalues (length `d` unless the spec is thin).
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// All `d` eigenvalues, zero-padded for thin specs.
    pub fn full_eigenvalues(&self) -> Vec<f64> {
        let mut v = self.eigenvalues.clone();
        v.resize(self.dim, 0.0);
        v
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn basis_seed(&self) -> Option<u64> {
        self.basis_seed
    }

    pub fn is_thin(&self) -> bool {
        self.basis.ncols() < self.dim
    }

    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    /// Dense `Λ = U diag(λ) Uᵀ`, symmetrized.
    pub fn matrix(&self) -> DMatrix<f64> {
        self.apply(|x| x)
    }

    /// `U f(λ) Uᵀ` over the stored eigenpairs (complement contributes zero).
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.dim, self.basis.ncols(), |r, c| self.basis[(r, c)] * f(self.eigenvalues[c]));
        linalg::symmetrize(&(&scaled * self.basis.transpose()))
    }

    /// `L = U diag(√λ)` so that `x = L z` with `z` standard normal has covariance `Λ`.
    pub fn sqrt_factor(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.basis.ncols(), |r, c| self.basis[(r, c)] * self.eigenvalues[c].sqrt())
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    /// Smallest eigenvalue counting zeros (the literal `λ_min`).
    pub fn min_eigenvalue(&self) -> f64 {
        if self.is_thin() {
            0.0
        } else {
            self.eigenvalues.last().copied().unwrap_or(0.0)
        }
    }

    /// Smallest eigenvalue above `ZERO_EIGEN_REL · λ_max`, if any.
    pub fn min_nonzero_eigenvalue(&self) -> Option<f64> {
        let cutoff = ZERO_EIGEN_REL * self.max_eigenvalue();
        self.eigenvalues
            .iter()
            .copied()
            .filter(|&v| v > cutoff)
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))))
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) {
            return Err(Error::Domain(format!("scale factor {factor} must be positive")));
        }
        let mut out = self.clone();
        out.eigenvalues.iter_mut().for_each(|v| *v *= factor);
        Ok(out)
    }

    pub fn to_json(&self) -> CovarianceJson {
        let basis = if self.basis_seed.is_some() { None } else { Some(linalg::to_rows(&self.basis)) };
        CovarianceJson {
            dim: self.dim,
            eigenvalues: self.eigenvalues.clone(),
            basis_seed: self.basis_seed,
            basis,
            label: self.label.clone(),
        }
    }

    pub fn from_json(json: &CovarianceJson) -> Result<Self> {
        let choice = match (&json.basis_seed, &json.basis) {
            (Some(seed), _) => BasisChoice::Seed(*seed),
            (None, Some(rows)) => BasisChoice::Explicit(linalg::from_rows(rows)?),
            (None, None) => BasisChoice::Identity,
        };
        let spec = make_covariance(&json.eigenvalues, choice)?;
        check_dims("covariance json", json.dim, spec.dim, spec.dim == json.dim)?;
        Ok(spec.with_label(json.label.clone()))
    }
}

/// On-disk form: `{dim, eigenvalues, basis_seed | basis, label}`; basis row-major.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CovarianceJson {
    pub dim: usize,
    pub eigenvalues: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub label: String,
}

impl Serialize for CovarianceSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for CovarianceSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let json = CovarianceJson::deserialize(d)?;
        CovarianceSpec::from_json(&json).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FrameMode {
    /// Full `d × d` Haar basis with the support placed on shuffled coordinates.
    #[default]
    Full,
    /// Only the `B` support directions are stored (a Haar-random `d × B` frame).
    Thin,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskFamilySpec {
    pub alpha: f64,
    pub support: usize,
    pub dim: usize,
    pub count: usize,
    pub seed: u64,
    #[serde(default)]
    pub frames: FrameMode,
}

impl TaskFamilySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Domain(format!("alpha = {} must be nonnegative", self.alpha)));
        }
        if self.support == 0 || self.support > self.dim {
            return Err(Error::Domain(format!("support B = {} must lie in 1..={}", self.support, self.dim)));
        }
        Ok(())
    }
}

/// Unit-sum eigenvalues proportional to `i^{-alpha}`, `i = 1..=support`.
pub fn power_law_eigenvalues(alpha: f64, support: usize) -> Vec<f64> {
    let raw: Vec<f64> = (1..=support).map(|i| (i as f64).powf(-alpha)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

const FAMILY_STREAM: u64 = 0x7461_736b; // "task"

/// One covariance per task index; task `t` depends only on `(seed, t)`.
pub fn power_law_spectrum(family: &TaskFamilySpec) -> Result<Vec<CovarianceSpec>> {
    family.validate()?;
    let eigs = power_law_eigenvalues(family.alpha, family.support);
    let d = family.dim;
    (0..family.count)
        .map(|t| {
            let mut rng = rng::stream(rng::derive(family.seed, FAMILY_STREAM), t as u64);
            let label = format!("alpha={},B={},task={t}", family.alpha, family.support);
            match family.frames {
                FrameMode::Full => {
                    let q = linalg::haar_orthogonal(d, &mut rng);
                    let positions = sample_indices(&mut rng, d, family.support).into_vec();
                    let mut in_support = vec![false; d];
                    positions.iter().for_each(|&p| in_support[p] = true);
                    let column_order: Vec<usize> =
                        positions.iter().copied().chain((0..d).filter(|p| !in_support[*p])).collect();
                    let basis = DMatrix::from_fn(d, d, |r, c| q[(r, column_order[c])]);
                    let mut full = eigs.clone();
                    full.resize(d, 0.0);
                    Ok(make_covariance(&full, BasisChoice::Explicit(basis))?.with_label(label))
                }
                FrameMode::Thin => {
                    let frame = linalg::haar_frame(d, family.support, &mut rng);
                    Ok(make_covariance(&eigs, BasisChoice::Explicit(frame))?.with_label(label))
                }
            }
        })
        .collect()
}

/// `tr(Λ) / λ_min(Λ)` with `λ_min` the smallest nonzero eigenvalue.
pub fn hardness(cov: &CovarianceSpec) -> Result<f64> {
    let min = cov
        .min_nonzero_eigenvalue()
        .ok_or_else(|| Error::Domain("hardness of an all-zero spectrum is undefined".into()))?;
    Ok(cov.trace() / min)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GammaProvenance {
    SingleTask { n: usize },
    MultiTask { n: usize, pi: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaMatrix {
    pub dim: usize,
    pub matrix: DMatrix<f64>,
    pub provenance: GammaProvenance,
}

impl GammaMatrix {
    /// Wraps an arbitrary matrix (e.g. one read back from trained parameters).
    pub fn from_matrix(matrix: DMatrix<f64>, provenance: GammaProvenance) -> Result<Self> {
        check_dims("gamma", "square", format!("{}x{}", matrix.nrows(), matrix.ncols()), matrix.is_square())?;
        Ok(Self { dim: matrix.nrows(), matrix, provenance })
    }

    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        linalg::inverse(&self.matrix, "Γ")
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        linalg::asymmetry(&self.matrix) <= tol
    }

    pub fn n(&self) -> usize {
        match &self.provenance {
            GammaProvenance::SingleTask { n } | GammaProvenance::MultiTask { n, .. } => *n,
        }
    }
}

/// `Γ = (1 + 1/n) Λ + (tr Λ / n) I`.
pub fn gamma_single(cov: &CovarianceSpec, n: usize) -> Result<GammaMatrix> {
    if n == 0 {
        return Err(Error::Domain("prompt length n must be at least 1".into()));
    }
    let nf = n as f64;
    let shift = cov.trace() / nf;
    let mut matrix = cov.matrix() * (1.0 + 1.0 / nf);
    for i in 0..cov.dim() {
        matrix[(i, i)] += shift;
    }
    Ok(GammaMatrix { dim: cov.dim(), matrix, provenance: GammaProvenance::SingleTask { n } })
}

/// Eigenvalues of the single-task Γ, paired with `cov`'s full (zero-padded) spectrum.
pub fn gamma_single_eigenvalues(cov: &CovarianceSpec, n: usize) -> Vec<f64> {
    let nf = n as f64;
    let shift = cov.trace() / nf;
    cov.full_eigenvalues().into_iter().map(|l| (1.0 + 1.0 / nf) * l + shift).collect()
}

/// Tasks with selection probabilities on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskMixture {
    pub tasks: Vec<CovarianceSpec>,
    pub weights: Vec<f64>,
}

pub fn check_simplex(pi: &[f64], tol: f64) -> Result<()> {
    if pi.is_empty() {
        return Err(Error::Domain("empty weight vector".into()));
    }
    if let Some(bad) = pi.iter().find(|p| !(**p >= -tol) || !p.is_finite()) {
        return Err(Error::Domain(format!("weight {bad} is negative")));
    }
    let sum: f64 = pi.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(Error::Domain(format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

impl TaskMixture {
    pub fn new(tasks: Vec<CovarianceSpec>, weights: Vec<f64>) -> Result<Self> {
        check_dims("mixture weights", tasks.len(), weights.len(), tasks.len() == weights.len())?;
        check_simplex(&weights, SIMPLEX_TOL)?;
        let d = tasks[0].dim();
        if let Some(t) = tasks.iter().find(|t| t.dim() != d) {
            return Err(Error::Dimension {
                context: "mixture task dimension",
                expected: d.to_string(),
                actual: t.dim().to_string(),
            });
        }
        Ok(Self { tasks, weights })
    }

    pub fn single(cov: CovarianceSpec) -> Self {
        Self { tasks: vec![cov], weights: vec![1.0] }
    }

    pub fn dim(&self) -> usize {
        self.tasks[0].dim()
    }

    pub fn is_single(&self) -> bool {
        self.tasks.len() == 1
    }

    fn active(&self) -> impl Iterator<Item = (&CovarianceSpec, f64)> {
        self.tasks.iter().zip(self.weights.iter().copied()).filter(|(_, w)| *w != 0.0)
    }

    /// `Σ_ℓ π_ℓ Λ_ℓ`.
    pub fn mean_covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        self.active().fold(DMatrix::zeros(d, d), |acc, (t, w)| acc + t.matrix() * w)
    }

    /// `E[(XXᵀ/n)²]` under per-column mixture sampling.
    pub fn second_moment_of_sample_cov(&self, n: usize) -> DMatrix<f64> {
        fourth_moment_closed_mixture(self, &DMatrix::identity(self.dim(), self.dim()), n)
            .expect("identity has matching dimensions")
    }
}

impl From<CovarianceSpec> for TaskMixture {
    fn from(cov: CovarianceSpec) -> Self {
        TaskMixture::single(cov)
    }
}

/// Multi-task preconditioner:
/// `Γ = ((n−1)/n) M + (1/n)(2 Σπ_ℓΛ_ℓ² + Σπ_ℓ tr(Λ_ℓ) Λ_ℓ) M⁻¹` with `M = Σπ_ℓΛ_ℓ`.
///
/// Not symmetric in general: the two factors of the second term commute only
/// when the task covariances share an eigenbasis.
pub fn gamma_multi(tasks: &[CovarianceSpec], pi: &[f64], n: usize) -> Result<GammaMatrix> {
    if n == 0 {
        return Err(Error::Domain("prompt length n must be at least 1".into()));
    }
    let mixture = TaskMixture::new(tasks.to_vec(), pi.to_vec())?;
    let d = mixture.dim();
    let nf = n as f64;
    let mean = mixture.mean_covariance();
    let eig = sym_eigen(&mean);
    let top = eig.values[0].abs();
    let bottom = eig.values[d - 1];
    if !(bottom > ZERO_EIGEN_REL * top) || top == 0.0 {
        let direction: Vec<String> = eig.vectors.column(d - 1).iter().map(|v| format!("{v:.4}")).collect();
        return Err(Error::Domain(format!(
            "task mixture Σπ_ℓΛ_ℓ is singular (eigenvalue {bottom:e}) along direction [{}]",
            direction.join(", ")
        )));
    }
    let mean_inv = eig.apply(|x| 1.0 / x);
    let mut numerator = DMatrix::zeros(d, d);
    for (t, w) in mixture.active() {
        let lam = t.matrix();
        numerator += (&lam * &lam) * (2.0 * w) + &lam * (t.trace() * w);
    }
    let matrix = &mean * ((nf - 1.0) / nf) + (numerator * mean_inv) / nf;
    Ok(GammaMatrix { dim: d, matrix, provenance: GammaProvenance::MultiTask { n, pi: pi.to_vec() } })
}

/// `E[(XXᵀ/n) A (XXᵀ/n)]` for columns `x ~ N(0, Λ)`:
/// `((n−1)/n) ΛAΛ + (1/n)(Λ(A+Aᵀ)Λ + tr(ΛA) Λ)`.
pub fn fourth_moment_closed(cov: &CovarianceSpec, a: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    fourth_moment_closed_mixture(&TaskMixture::single(cov.clone()), a, n)
}

/// Mixture form: `((n−1)/n) M A M + (1/n) Σ π_ℓ (Λ_ℓ(A+Aᵀ)Λ_ℓ + tr(AΛ_ℓ) Λ_ℓ)`.
pub fn fourth_moment_closed_mixture(mixture: &TaskMixture, a: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    let d = mixture.dim();
    check_dims(
        "fourth moment matrix A",
        format!("{d}x{d}"),
        format!("{}x{}", a.nrows(), a.ncols()),
        a.nrows() == d && a.ncols() == d,
    )?;
    if n == 0 {
        return Err(Error::Domain("prompt length n must be at least 1".into()));
    }
    let nf = n as f64;
    let mean = mixture.mean_covariance();
    let sym = a + a.transpose();
    let mut single = DMatrix::zeros(d, d);
    for (t, w) in mixture.active() {
        let lam = t.matrix();
        single += (&lam * &sym * &lam + &lam * linalg::trace_of_product(a, &lam)) * w;
    }
    Ok(&mean * a * &mean * ((nf - 1.0) / nf) + single / nf)
}

#[derive(Debug, Clone)]
pub struct MomentEstimate {
    pub mean: DMatrix<f64>,
    pub std_err: DMatrix<f64>,
    pub trials: usize,
}

impl MomentEstimate {
    /// Largest `|mean − reference| / SE` over entries; entries with zero SE must match exactly.
    pub fn max_z_score(&self, reference: &DMatrix<f64>) -> f64 {
        self.mean
            .iter()
            .zip(self.std_err.iter())
            .zip(reference.iter())
            .map(|((m, se), r)| {
                let diff = (m - r).abs();
                if *se > 0.0 {
                    diff / se
                } else if diff <= 1e-12 * r.abs().max(1.0) {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }
}

const MC_CHUNK: usize = 1024;

/// Draws an `d × n` matrix whose columns come from the mixture, each column's
/// task chosen independently by the weights.
pub(crate) fn sample_mixture_columns<R: rand::Rng + ?Sized>(
    factors: &[DMatrix<f64>],
    picker: Option<&WeightedIndex<f64>>,
    n: usize,
    rng: &mut R,
) -> DMatrix<f64> {
    let d = factors[0].nrows();
    let mut x = DMatrix::zeros(d, n);
    for j in 0..n {
        let task = picker.map_or(0, |p| p.sample(rng));
        let l = &factors[task];
        let z = linalg::standard_normal_vector(l.ncols(), rng);
        x.set_column(j, &(l * z));
    }
    x
}

/// Monte Carlo estimate of `E[(XXᵀ/n) A (XXᵀ/n)]` with per-entry standard errors.
///
/// Trials are processed in fixed-size chunks, chunk `c` drawing from stream
/// `(seed, c)`. Chunks run in parallel and their sums are combined in chunk
/// order, so the result does not depend on scheduling.
pub fn fourth_moment_mc(
    mixture: &TaskMixture,
    a: &DMatrix<f64>,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<MomentEstimate> {
    let d = mixture.dim();
    check_dims(
        "fourth moment matrix A",
        format!("{d}x{d}"),
        format!("{}x{}", a.nrows(), a.ncols()),
        a.nrows() == d && a.ncols() == d,
    )?;
    if trials < 100 {
        return Err(Error::Domain(format!("need at least 100 trials, got {trials}")));
    }
    if n == 0 {
        return Err(Error::Domain("prompt length n must be at least 1".into()));
    }
    let factors: Vec<DMatrix<f64>> = mixture.tasks.iter().map(CovarianceSpec::sqrt_factor).collect();
    let picker = if mixture.is_single() {
        None
    } else {
        Some(WeightedIndex::new(&mixture.weights).map_err(|e| Error::Domain(e.to_string()))?)
    };
    let nf = n as f64;
    let chunks = trials.div_ceil(MC_CHUNK);
    let partials: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = rng::stream(seed, chunk as u64);
            let count = MC_CHUNK.min(trials - chunk * MC_CHUNK);
            let mut chunk_sum = DMatrix::zeros(d, d);
            let mut chunk_sq = DMatrix::zeros(d, d);
            for _ in 0..count {
                let x = sample_mixture_columns(&factors, picker.as_ref(), n, &mut rng);
                let s = (&x * x.transpose()) / nf;
                let p = &s * a * &s;
                chunk_sq += p.component_mul(&p);
                chunk_sum += p;
            }
            (chunk_sum, chunk_sq)
        })
        .collect();
    let mut sum = DMatrix::zeros(d, d);
    let mut sum_sq = DMatrix::zeros(d, d);
    for (chunk_sum, chunk_sq) in partials {
        sum += chunk_sum;
        sum_sq += chunk_sq;
    }
    let t = trials as f64;
    let mean = &sum / t;
    let std_err = DMatrix::from_fn(d, d, |r, c| {
        let var = (sum_sq[(r, c)] - t * mean[(r, c)].powi(2)) / (t - 1.0);
        (var.max(0.0) / t).sqrt()
    });
    Ok(MomentEstimate { mean, std_err, trials })
}

/// Random SPD covariance with eigenvalues uniform in `[lo, hi]` and a Haar basis.
pub fn random_spd<R: rand::Rng + ?Sized>(dim: usize, lo: f64, hi: f64, rng: &mut R) -> CovarianceSpec {
    let eigs: Vec<f64> = (0..dim).map(|_| rng.random_range(lo..=hi)).collect();
    let basis = linalg::haar_orthogonal(dim, rng);
    make_covariance(&eigs, BasisChoice::Explicit(basis)).expect("valid random spectrum")
}

/// Spectrum of dimension `dim`, trace `trace`, with hardness exactly `h ≥ dim`:
/// one eigenvalue `trace / h`, the rest equal.
pub fn spectrum_with_hardness(dim: usize, trace: f64, h: f64) -> Result<Vec<f64>> {
    if dim == 0 || !(h >= dim as f64) {
        return Err(Error::Domain(format!("hardness {h} is below the minimum {dim}")));
    }
    if dim == 1 {
        if h != 1.0 {
            return Err(Error::Domain(format!("a one-dimensional spectrum has hardness 1, not {h}")));
        }
        return Ok(vec![trace]);
    }
    let small = trace / h;
    let rest = (trace - small) / (dim as f64 - 1.0);
    let mut v = vec![rest; dim - 1];
    v.push(small);
    Ok(v)
}
