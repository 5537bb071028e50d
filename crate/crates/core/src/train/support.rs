//! Exact population gradient of the full `(2d+2)²` parameters and the
//! support-invariance check built on it.
//!
//! With `ŵ₀ = 0` the loss integrand is a polynomial of degree two in the
//! sample covariance `S = XXᵀ/n` (for fixed `w`) and of degree at most four
//! in `w`. Writing `S − Λ` as the mean of `n` i.i.d. centred terms
//! `Δ = xxᵀ − Λ` gives, for any quadratic `F`,
//!
//! `E F(S) = F(Λ) + (1/2n) E_x[F(Λ+Δ) + F(Λ−Δ) − 2F(Λ)]`,
//!
//! and both remaining Gaussian expectations (over `x` and over `w`) are
//! computed exactly with a tensor three-point Gauss–Hermite rule, which
//! integrates every polynomial of per-variable degree ≤ 5.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dims, Error, Result};
use crate::linalg::op_norm;
use crate::lsa::LsaParams;
use crate::task::{gamma_single, CovarianceSpec};

const MAX_QUADRATURE_DIM: usize = 6;
pub const SUPPORT_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ExactGradient {
    pub loss: f64,
    pub grad_v: DMatrix<f64>,
    pub grad_w: DMatrix<f64>,
}

fn gauss_hermite_grid(dim: usize) -> Vec<(DVector<f64>, f64)> {
    let s3 = 3f64.sqrt();
    let nodes = [(-s3, 1.0 / 6.0), (0.0, 2.0 / 3.0), (s3, 1.0 / 6.0)];
    let total = 3usize.pow(dim as u32);
    (0..total)
        .map(|mut code| {
            let mut z = DVector::zeros(dim);
            let mut weight = 1.0;
            for k in 0..dim {
                let (x, wt) = nodes[code % 3];
                code /= 3;
                z[k] = x;
                weight *= wt;
            }
            (z, weight)
        })
        .collect()
}

struct Integrand<'a> {
    params: &'a LsaParams,
    n: f64,
    we: DVector<f64>,
    vt: DMatrix<f64>,
}

struct Terms {
    loss: f64,
    grad_v: DMatrix<f64>,
    grad_w_col: DVector<f64>,
}

impl Terms {
    fn zeros(size: usize) -> Self {
        Self { loss: 0.0, grad_v: DMatrix::zeros(size, size), grad_w_col: DVector::zeros(size) }
    }

    fn axpy(&mut self, a: f64, other: &Terms) {
        self.loss += a * other.loss;
        self.grad_v += &other.grad_v * a;
        self.grad_w_col += &other.grad_w_col * a;
    }
}

impl Integrand<'_> {
    /// Loss and gradient integrands for a given `S` and `w` (labels `y = Xᵀw`).
    fn eval(&self, s: &DMatrix<f64>, w: &DVector<f64>) -> Terms {
        let d = self.params.d;
        let size = 2 * d + 2;
        let sw = s * w;
        let mut m = DMatrix::zeros(size, size);
        m.view_mut((0, 0), (d, d)).copy_from(s);
        m.view_mut((0, d), (d, 1)).copy_from(&sw);
        m.view_mut((d, 0), (1, d)).copy_from(&sw.transpose());
        m[(d, d)] = w.dot(&sw);
        m[(size - 1, size - 1)] = 1.0 / self.n;
        let q = &m * &self.we;
        let mut r = &self.params.v * &q;
        for i in 0..d {
            r[d + 1 + i] -= w[i];
        }
        let grad_w_col = &m * (&self.vt * &r);
        Terms { loss: 0.5 * r.norm_squared(), grad_v: &r * q.transpose(), grad_w_col }
    }
}

/// Exact `L`, `∇_V L`, `∇_W L` of the population loss for a single task with `ŵ₀ = 0`, `ρ = n`.
pub fn exact_population_gradient(cov: &CovarianceSpec, n: usize, params: &LsaParams) -> Result<ExactGradient> {
    let d = cov.dim();
    check_dims("exact gradient", d, params.d, d == params.d)?;
    if d > MAX_QUADRATURE_DIM {
        return Err(Error::Domain(format!("exact quadrature supports d <= {MAX_QUADRATURE_DIM}, got {d}")));
    }
    if n == 0 {
        return Err(Error::Domain("n must be at least 1".into()));
    }
    let size = 2 * d + 2;
    let f = Integrand { params, n: n as f64, we: params.w.column(size - 1).into_owned(), vt: params.v.transpose() };
    let lam = cov.matrix();
    let factor = cov.sqrt_factor();
    let x_nodes: Vec<(DMatrix<f64>, f64)> = gauss_hermite_grid(factor.ncols())
        .into_iter()
        .map(|(z, wt)| {
            let x = &factor * z;
            (&x * x.transpose(), wt)
        })
        .collect();
    let w_nodes = gauss_hermite_grid(d);
    let half_over_n = 0.5 / n as f64;

    let mut total = Terms::zeros(size);
    for (w, w_weight) in &w_nodes {
        let base = f.eval(&lam, w);
        let mut acc = Terms::zeros(size);
        acc.axpy(1.0, &base);
        for (xx, x_weight) in &x_nodes {
            let plus = f.eval(xx, w);
            let minus = f.eval(&(&lam * 2.0 - xx), w);
            let a = x_weight * half_over_n;
            acc.axpy(a, &plus);
            acc.axpy(a, &minus);
            acc.axpy(-2.0 * a, &base);
        }
        total.axpy(*w_weight, &acc);
    }
    let mut grad_w = DMatrix::zeros(size, size);
    grad_w.set_column(size - 1, &total.grad_w_col);
    Ok(ExactGradient { loss: total.loss, grad_v: total.grad_v, grad_w })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportStep {
    pub step: usize,
    pub loss: f64,
    /// Largest `|∇V|` entry outside the `V₃₁` block.
    pub max_off_v: f64,
    /// Largest `|∇W|` entry outside the `cI` block and `W₂₄`.
    pub max_off_w: f64,
    /// Largest `|∇V₃₂|` entry.
    pub max_v32: f64,
    pub grad_w24: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub step: usize,
    pub block: String,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportReport {
    pub steps: Vec<SupportStep>,
    pub violations: Vec<Violation>,
    /// At step 0, every `∇W` entry other than `W₂₄` vanished (at `V = 0` the
    /// whole `∇W` is zero).
    pub only_w24_at_start: bool,
}

impl SupportReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn block_of(index: usize, d: usize) -> usize {
    match index {
        i if i < d => 1,
        i if i == d => 2,
        i if i <= 2 * d => 3,
        _ => 4,
    }
}

fn v_on_pattern(r: usize, c: usize, d: usize) -> bool {
    block_of(r, d) == 3 && block_of(c, d) == 1
}

fn w_on_pattern(r: usize, c: usize, d: usize) -> bool {
    (block_of(r, d) == 1 && block_of(c, d) == 3) || (r == d && c == 2 * d + 1)
}

/// Per-block maxima of off-pattern entries, largest first.
fn off_pattern_blocks(
    g: &DMatrix<f64>,
    d: usize,
    name: char,
    on: fn(usize, usize, usize) -> bool,
) -> Vec<(String, f64)> {
    let mut blocks: Vec<(String, f64)> = Vec::new();
    for r in 0..g.nrows() {
        for c in 0..g.ncols() {
            if on(r, c, d) {
                continue;
            }
            let label = format!("{name}{}{}", block_of(r, d), block_of(c, d));
            let mag = g[(r, c)].abs();
            match blocks.iter_mut().find(|(l, _)| *l == label) {
                Some(entry) => entry.1 = entry.1.max(mag),
                None => blocks.push((label, mag)),
            }
        }
    }
    blocks.sort_by(|a, b| b.1.total_cmp(&a.1));
    blocks
}

/// Full-matrix gradient descent from the structured initialization with
/// `V₃₁(0) = 0`, checking the gradient's support at every step.
pub fn check_support_invariance(cov: &CovarianceSpec, n: usize, c: f64, steps: usize) -> Result<SupportReport> {
    let params = LsaParams::structured(&DMatrix::zeros(cov.dim(), cov.dim()), c)?;
    check_support_invariance_from(cov, n, params, steps)
}

/// Same check from arbitrary starting parameters. `W₂₄` is held fixed; every
/// other entry of `V` and `W` follows its exact population gradient.
pub fn check_support_invariance_from(
    cov: &CovarianceSpec,
    n: usize,
    mut params: LsaParams,
    steps: usize,
) -> Result<SupportReport> {
    let d = cov.dim();
    let c = params.c;
    let gamma = gamma_single(cov, n)?;
    let gl = &gamma.matrix * cov.matrix();
    let eta = 1.0 / (c * c * op_norm(&gamma.matrix).max(op_norm(&gl)));
    let w24 = params.w24();
    let mut report = SupportReport { steps: Vec::new(), violations: Vec::new(), only_w24_at_start: false };
    for step in 0..steps {
        let g = exact_population_gradient(cov, n, &params)?;
        let v_blocks = off_pattern_blocks(&g.grad_v, d, 'V', v_on_pattern);
        let w_blocks = off_pattern_blocks(&g.grad_w, d, 'W', w_on_pattern);
        let max_off_v = v_blocks.first().map_or(0.0, |b| b.1);
        let max_off_w = w_blocks.first().map_or(0.0, |b| b.1);
        let max_v32 = (0..d).map(|i| g.grad_v[(d + 1 + i, d)].abs()).fold(0.0, f64::max);
        let grad_w24 = g.grad_w[(d, 2 * d + 1)];
        if step == 0 {
            // every ∇W entry other than W24 vanishes, including the cI block
            let mut others = g.grad_w.clone();
            others[(d, 2 * d + 1)] = 0.0;
            report.only_w24_at_start = crate::linalg::max_abs(&others) <= SUPPORT_TOL;
        }
        for (block, magnitude) in v_blocks.iter().chain(w_blocks.iter()) {
            if *magnitude > SUPPORT_TOL {
                report.violations.push(Violation { step, block: block.clone(), magnitude: *magnitude });
            }
        }
        report.steps.push(SupportStep { step, loss: g.loss, max_off_v, max_off_w, max_v32, grad_w24 });
        params.v -= &g.grad_v * eta;
        params.w -= &g.grad_w * eta;
        params.w[(d, 2 * d + 1)] = w24;
    }
    Ok(report)
}
