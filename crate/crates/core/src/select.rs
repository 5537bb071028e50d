//! Task selection: choose mixture weights `π` on the simplex so the training
//! mixture `Σπ_ℓΛ_ℓ` matches a target covariance `Σ`.
//!
//! The convex surrogate is `‖I − Σ⁻¹ Σ_ℓ π_ℓ Λ_ℓ‖_F² = πᵀQπ − 2bᵀπ + d`,
//! minimised by projected gradient descent. The original CoT objective
//! `tr((I − Γ^{-1/2} Σ Γ^{-1/2})^{2k})` is evaluated at the solution.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bounds::mismatch_trace;
use crate::error::{check_dims, Error, Result};
use crate::linalg::{op_norm, sym_eigen};
use crate::task::{gamma_multi, hardness, CovarianceJson, CovarianceSpec, ZERO_EIGEN_REL};

pub const TRACE_TOL: f64 = 1e-9;
pub const DEFAULT_RIDGE: f64 = 1e-8;
const FACTORED_MAX_RANK: usize = 4096;
const DENSE_BLOCK_ENTRIES: usize = 1 << 24;

/// Euclidean projection onto `{π ≥ 0, Σπ = 1}` (sort-based).
pub fn simplex_project(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Domain("cannot project an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("simplex projection input".into()));
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - 1.0) / (i + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    Ok(v.iter().map(|x| (x - theta).max(0.0)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionProblem {
    pub tasks: Vec<CovarianceSpec>,
    pub target: CovarianceSpec,
    pub n: usize,
    pub k: usize,
    pub ridge: f64,
}

impl SelectionProblem {
    pub fn new(tasks: Vec<CovarianceSpec>, target: CovarianceSpec, n: usize, k: usize) -> Result<Self> {
        let problem = Self { tasks, target, n, k, ridge: DEFAULT_RIDGE };
        problem.validate()?;
        Ok(problem)
    }

    pub fn with_ridge(mut self, ridge: f64) -> Result<Self> {
        self.ridge = ridge;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Domain("task selection needs at least one task".into()));
        }
        if self.n == 0 {
            return Err(Error::Domain("prompt length n must be at least 1".into()));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Domain(format!("ridge = {} must be nonnegative", self.ridge)));
        }
        let d = self.target.dim();
        for (i, cov) in self.tasks.iter().chain(std::iter::once(&self.target)).enumerate() {
            check_dims("selection task dimension", d, cov.dim(), cov.dim() == d)?;
            if (cov.trace() - 1.0).abs() > TRACE_TOL {
                return Err(Error::Domain(format!(
                    "covariance {i} has trace {} but unit trace is required",
                    cov.trace()
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.target.dim()
    }

    /// `(Σ + δ (tr Σ / d) I)⁻¹`.
    fn target_inverse(&self) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let shift = self.ridge * self.target.trace() / d as f64;
        let values: Vec<f64> = self.target.full_eigenvalues().iter().map(|l| l + shift).collect();
        let top = values.iter().cloned().fold(0.0, f64::max);
        let bottom = values.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(bottom > ZERO_EIGEN_REL * top) {
            return Err(Error::Domain(format!(
                "target covariance is singular (smallest eigenvalue {bottom:e}); use a positive ridge"
            )));
        }
        if self.target.is_thin() {
            // complete the frame: Σ⁻¹ = U diag(1/(λ+s)) Uᵀ + (I − UUᵀ)/s
            let u = self.target.basis();
            let inner = DMatrix::from_diagonal(&DVector::from_iterator(
                u.ncols(),
                self.target.eigenvalues().iter().map(|l| 1.0 / (l + shift) - 1.0 / shift),
            ));
            return Ok(u * inner * u.transpose() + DMatrix::identity(d, d) / shift);
        }
        Ok(self.target.apply(|l| 1.0 / (l + shift)))
    }

    pub fn to_json(&self) -> SelectionProblemJson {
        SelectionProblemJson {
            tasks: self.tasks.iter().map(CovarianceSpec::to_json).collect(),
            target: self.target.to_json(),
            n: self.n,
            k: self.k,
            ridge: self.ridge,
        }
    }

    pub fn from_json(json: &SelectionProblemJson) -> Result<Self> {
        let tasks = json.tasks.iter().map(CovarianceSpec::from_json).collect::<Result<Vec<_>>>()?;
        Self::new(tasks, CovarianceSpec::from_json(&json.target)?, json.n, json.k)?.with_ridge(json.ridge)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionProblemJson {
    pub tasks: Vec<CovarianceJson>,
    pub target: CovarianceJson,
    pub n: usize,
    pub k: usize,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub q: DMatrix<f64>,
    pub b: DVector<f64>,
    pub constant: f64,
}

impl Quadratic {
    pub fn value(&self, pi: &[f64]) -> f64 {
        let p = DVector::from_column_slice(pi);
        p.dot(&(&self.q * &p)) - 2.0 * self.b.dot(&p) + self.constant
    }

    fn gradient(&self, p: &DVector<f64>) -> DVector<f64> {
        (&self.q * p - &self.b) * 2.0
    }
}

/// `(U_ℓ, Σ⁻¹U_ℓD_ℓ)` restricted to the nonzero spectrum of each task.
fn task_factors(problem: &SelectionProblem, sigma_inv: &DMatrix<f64>) -> Vec<(DMatrix<f64>, DMatrix<f64>)> {
    problem
        .tasks
        .iter()
        .map(|t| {
            let top = t.max_eigenvalue();
            let r = t.eigenvalues().iter().take_while(|&&l| l > ZERO_EIGEN_REL * top).count();
            let u = t.basis().columns(0, r).into_owned();
            let scaled = DMatrix::from_fn(u.nrows(), r, |i, j| u[(i, j)] * t.eigenvalues()[j]);
            (u, sigma_inv * scaled)
        })
        .collect()
}

/// `Q_{ℓj} = tr(Λ_ℓ Σ⁻² Λ_j)`, `b_ℓ = tr(Σ⁻¹ Λ_ℓ)`, constant `d`.
///
/// With `C_ℓ = Σ⁻¹U_ℓD_ℓ`, `Q_{ℓj} = Σ_{a,b} (C_ℓᵀC_j)_{ab} (U_ℓᵀU_j)_{ab}`, so
/// two Gram products of the stacked factors give every entry at once.
pub fn build_quadratic(problem: &SelectionProblem) -> Result<Quadratic> {
    let sigma_inv = problem.target_inverse()?;
    let factors = task_factors(problem, &sigma_inv);
    let total_rank: usize = factors.iter().map(|(u, _)| u.ncols()).sum();
    if total_rank > FACTORED_MAX_RANK {
        return build_quadratic_dense_with(problem, &factors);
    }
    let d = problem.dim();
    let mut us = DMatrix::zeros(d, total_rank);
    let mut cs = DMatrix::zeros(d, total_rank);
    let mut offsets = Vec::with_capacity(factors.len() + 1);
    let mut at = 0;
    for (u, c) in &factors {
        offsets.push(at);
        us.columns_mut(at, u.ncols()).copy_from(u);
        cs.columns_mut(at, c.ncols()).copy_from(c);
        at += u.ncols();
    }
    offsets.push(at);
    let hadamard = (cs.transpose() * &cs).component_mul(&(us.transpose() * &us));
    let t = factors.len();
    let q = DMatrix::from_fn(t, t, |l, j| {
        hadamard.view((offsets[l], offsets[j]), (offsets[l + 1] - offsets[l], offsets[j + 1] - offsets[j])).sum()
    });
    let b = DVector::from_iterator(t, factors.iter().map(|(u, c)| u.component_mul(c).sum()));
    Ok(Quadratic { q: crate::linalg::symmetrize(&q), b, constant: d as f64 })
}

/// Reference assembly through the entries of every `Σ⁻¹Λ_ℓ`; used directly
/// when the stacked factors would be too large.
pub fn build_quadratic_dense(problem: &SelectionProblem) -> Result<Quadratic> {
    let sigma_inv = problem.target_inverse()?;
    let factors = task_factors(problem, &sigma_inv);
    build_quadratic_dense_with(problem, &factors)
}

/// Streams row blocks of every `Σ⁻¹Λ_ℓ = C_ℓU_ℓᵀ` into a `(rows·d) × T`
/// matrix and accumulates its Gram matrix, so memory stays bounded at `d = 1000`.
fn build_quadratic_dense_with(
    problem: &SelectionProblem,
    factors: &[(DMatrix<f64>, DMatrix<f64>)],
) -> Result<Quadratic> {
    let d = problem.dim();
    let t = factors.len();
    let rows_per_block = (DENSE_BLOCK_ENTRIES / (d * t).max(1)).clamp(1, d);
    let mut q = DMatrix::zeros(t, t);
    let mut b = DVector::zeros(t);
    let mut start = 0;
    while start < d {
        let rows = rows_per_block.min(d - start);
        let mut block = DMatrix::zeros(rows * d, t);
        for (l, (u, c)) in factors.iter().enumerate() {
            let part = c.rows(start, rows) * u.transpose();
            block.column_mut(l).copy_from_slice(part.as_slice());
            b[l] += (0..rows).map(|r| part[(r, start + r)]).sum::<f64>();
        }
        q += block.transpose() * &block;
        start += rows;
    }
    Ok(Quadratic { q: crate::linalg::symmetrize(&q), b, constant: d as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub mapping_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iters: 200_000, rel_tol: 1e-12, mapping_tol: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub pi: Vec<f64>,
    pub objective_quadratic: f64,
    pub objective_uniform: f64,
    /// `tr((I − Γ^{-1/2}ΣΓ^{-1/2})^{2k})` at `π`; absent when `Γ(π)` is singular.
    pub objective_nonconvex: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub fn solve_selection(problem: &SelectionProblem) -> Result<SelectionResult> {
    solve_selection_with(problem, &SolverOptions::default())
}

pub fn solve_selection_with(problem: &SelectionProblem, options: &SolverOptions) -> Result<SelectionResult> {
    problem.validate()?;
    let quad = build_quadratic(problem)?;
    let (pi, iterations, converged) = minimise_on_simplex(&quad, options)?;
    let uniform = vec![1.0 / pi.len() as f64; pi.len()];
    let objective_nonconvex = eval_nonconvex_objective(&problem.tasks, &pi, &problem.target, problem.n, problem.k).ok();
    Ok(SelectionResult {
        objective_quadratic: quad.value(&pi),
        objective_uniform: quad.value(&uniform),
        objective_nonconvex,
        pi,
        iterations,
        converged,
    })
}

/// Projected gradient descent from the uniform point with backtracking on
/// the standard sufficient-decrease test; each accepted step never increases
/// the objective.
pub fn minimise_on_simplex(quad: &Quadratic, options: &SolverOptions) -> Result<(Vec<f64>, usize, bool)> {
    let t = quad.b.len();
    let mut pi = DVector::from_element(t, 1.0 / t as f64);
    let norm = op_norm(&quad.q);
    if t == 1 || norm == 0.0 {
        return Ok((pi.as_slice().to_vec(), 0, true));
    }
    let mut eta = 1.0 / (2.0 * norm);
    let mut value = quad.value(pi.as_slice());
    for iter in 1..=options.max_iters {
        let grad = quad.gradient(&pi);
        let (next, next_value) = loop {
            let trial = DVector::from_vec(simplex_project((&pi - &grad * eta).as_slice())?);
            let step = &trial - &pi;
            let trial_value = quad.value(trial.as_slice());
            if trial_value <= value + grad.dot(&step) + step.norm_squared() / (2.0 * eta) + 1e-15 * value.abs() {
                break (trial, trial_value);
            }
            eta *= 0.5;
        };
        let mapping = (&next - &pi).norm() / eta;
        let rel_change = (value - next_value).abs() / value.abs().max(f64::MIN_POSITIVE);
        pi = next;
        value = next_value;
        if mapping <= options.mapping_tol || rel_change <= options.rel_tol {
            return Ok((pi.as_slice().to_vec(), iter, true));
        }
    }
    Ok((pi.as_slice().to_vec(), options.max_iters, false))
}

/// `tr((I − Γ(π)^{-1/2} Σ Γ(π)^{-1/2})^{2k})` with the multi-task `Γ(π)`.
pub fn eval_nonconvex_objective(
    tasks: &[CovarianceSpec],
    pi: &[f64],
    target: &CovarianceSpec,
    n: usize,
    k: usize,
) -> Result<f64> {
    let gamma = gamma_multi(tasks, pi, n)?;
    mismatch_trace(&gamma, &target.matrix(), k)
}

/// Which eigenvalue counts as `σ_min` when classifying hard tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaMinRule {
    /// Smallest nonzero eigenvalue, so rank-deficient tasks are judged on their support.
    #[default]
    Nonzero,
    /// Smallest eigenvalue, zero for any rank-deficient task.
    Literal,
}

pub fn sigma_min(cov: &CovarianceSpec, rule: SigmaMinRule) -> f64 {
    match rule {
        SigmaMinRule::Nonzero => cov.min_nonzero_eigenvalue().unwrap_or(0.0),
        SigmaMinRule::Literal => cov.min_eigenvalue(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardTaskMass {
    pub mass: f64,
    pub hard_set: Vec<usize>,
    pub threshold: f64,
}

/// Probability mass on `D = {ℓ : σ_min(Λ_ℓ) ≤ 4(ε + σ_min(Σ))}`.
pub fn hard_task_mass(
    tasks: &[CovarianceSpec],
    pi: &[f64],
    target: &CovarianceSpec,
    epsilon: f64,
    rule: SigmaMinRule,
) -> Result<HardTaskMass> {
    if !(epsilon >= 0.0) {
        return Err(Error::Domain(format!("epsilon = {epsilon} must be nonnegative")));
    }
    check_dims("hard_task_mass weights", tasks.len(), pi.len(), tasks.len() == pi.len())?;
    let threshold = 4.0 * (epsilon + sigma_min(target, rule));
    let hard_set: Vec<usize> = (0..tasks.len()).filter(|&l| sigma_min(&tasks[l], rule) <= threshold).collect();
    let mass = hard_set.iter().fold(0.0, |acc, &l| acc + pi[l]);
    Ok(HardTaskMass { mass, hard_set, threshold })
}

/// `|σ_min(Σπ_ℓΛ_ℓ) − σ_min(Σ)|`, the slack at which the hard-mass guarantee applies.
pub fn estimate_epsilon(tasks: &[CovarianceSpec], pi: &[f64], target: &CovarianceSpec) -> Result<f64> {
    let d = target.dim();
    let mut mix = DMatrix::zeros(d, d);
    for (t, &w) in tasks.iter().zip(pi) {
        if w > 0.0 {
            mix += t.matrix() * w;
        }
    }
    let mix_min = *sym_eigen(&mix).values.last().expect("nonempty");
    Ok((mix_min - target.min_eigenvalue()).abs())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Domain("spearman needs two samples of equal length ≥ 2".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - mean) * (y - mean)).sum();
    let va: f64 = ra.iter().map(|x| (x - mean).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mean).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionRow {
    pub task_index: usize,
    pub type_label: String,
    pub sigma_min: f64,
    pub hardness: f64,
    pub pi: f64,
}

pub fn selection_rows(
    problem: &SelectionProblem,
    result: &SelectionResult,
    rule: SigmaMinRule,
) -> Result<Vec<SelectionRow>> {
    problem
        .tasks
        .iter()
        .zip(&result.pi)
        .enumerate()
        .map(|(i, (t, &pi))| {
            Ok(SelectionRow {
                task_index: i,
                type_label: t.label.clone(),
                sigma_min: sigma_min(t, rule),
                hardness: hardness(t)?,
                pi,
            })
        })
        .collect()
}

/// CSV with header `task_index,type_label,sigma_min,hardness,pi`.
pub fn write_selection_csv<W: Write>(rows: &[SelectionRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
