//! Population loss restricted to the `V₃₁` block, with `W` held at its
//! structured value. For `S = E[(XXᵀ/n)²]` and `M = E[xxᵀ]`:
//!
//! `L(V₃₁) = (c²/2) tr(V₃₁ S V₃₁ᵀ) + c tr(V₃₁ M) + d/2`,
//! `∇L = c² V₃₁ S + c M`.
//!
//! For a single task `S = ΓΛ` and `M = Λ`.

use nalgebra::DMatrix;

use super::{InitKind, StepSize, TrainConfig, TrainTrace};
use crate::error::{check_dims, Error, Result};
use crate::linalg::{self, frobenius_sq, op_norm};
use crate::task::{gamma_multi, gamma_single, GammaMatrix, TaskMixture};

#[derive(Debug, Clone)]
pub struct PopulationModel {
    pub n: usize,
    pub c: f64,
    /// `E[(XXᵀ/n)²]`.
    pub second_moment: DMatrix<f64>,
    /// `Σ π_ℓ Λ_ℓ`.
    pub mean: DMatrix<f64>,
    /// Closed-form Γ, `None` when the mixture mean is singular.
    pub gamma: Option<GammaMatrix>,
}

impl PopulationModel {
    pub fn new(mixture: &TaskMixture, n: usize, c: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("n must be at least 1".into()));
        }
        let gamma = if mixture.is_single() {
            Some(gamma_single(&mixture.tasks[0], n)?)
        } else {
            gamma_multi(&mixture.tasks, &mixture.weights, n).ok()
        };
        Ok(Self { n, c, second_moment: mixture.second_moment_of_sample_cov(n), mean: mixture.mean_covariance(), gamma })
    }

    pub fn dim(&self) -> usize {
        self.mean.nrows()
    }

    fn check(&self, v31: &DMatrix<f64>) -> Result<()> {
        let d = self.dim();
        check_dims(
            "V31",
            format!("{d}x{d}"),
            format!("{}x{}", v31.nrows(), v31.ncols()),
            v31.nrows() == d && v31.ncols() == d,
        )
    }

    pub fn loss(&self, v31: &DMatrix<f64>) -> Result<f64> {
        self.check(v31)?;
        let c = self.c;
        let quad = linalg::trace_of_product(&(v31 * &self.second_moment), &v31.transpose());
        let lin = linalg::trace_of_product(v31, &self.mean);
        Ok(0.5 * c * c * quad + c * lin + 0.5 * self.dim() as f64)
    }

    pub fn grad(&self, v31: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(v31)?;
        let c = self.c;
        Ok(v31 * &self.second_moment * (c * c) + &self.mean * c)
    }

    /// `−Γ⁻¹/c`.
    pub fn optimum(&self) -> Option<DMatrix<f64>> {
        self.gamma.as_ref().and_then(|g| g.inverse().ok()).map(|inv| inv * (-1.0 / self.c))
    }

    /// `1 / (c² · max(‖Γ‖, ‖S‖))`.
    pub fn auto_step(&self) -> f64 {
        let s = op_norm(&self.second_moment);
        let g = self.gamma.as_ref().map_or(0.0, |g| op_norm(&g.matrix));
        1.0 / (self.c * self.c * s.max(g))
    }
}

pub fn population_loss(v31: &DMatrix<f64>, mixture: &TaskMixture, n: usize, c: f64) -> Result<f64> {
    PopulationModel::new(mixture, n, c)?.loss(v31)
}

pub fn population_grad(v31: &DMatrix<f64>, mixture: &TaskMixture, n: usize, c: f64) -> Result<DMatrix<f64>> {
    PopulationModel::new(mixture, n, c)?.grad(v31)
}

/// Gradient descent on `V₃₁` from `init` (zero by default) until `‖∇L‖_F ≤ tol`.
pub fn train_population(mixture: &TaskMixture, config: &TrainConfig) -> Result<TrainTrace> {
    train_population_from(mixture, config, None)
}

pub fn train_population_from(
    mixture: &TaskMixture,
    config: &TrainConfig,
    init: Option<DMatrix<f64>>,
) -> Result<TrainTrace> {
    config.validate()?;
    let model = PopulationModel::new(mixture, config.n, config.c)?;
    let d = model.dim();
    let optimum = model.optimum();
    let eta = match config.eta {
        StepSize::Auto => model.auto_step(),
        StepSize::Fixed(e) => e,
    };
    let mut v = match (init, config.init) {
        (Some(v), _) => v,
        (None, InitKind::Zero) => DMatrix::zeros(d, d),
        (None, InitKind::Optimum) => {
            optimum.clone().ok_or_else(|| Error::Domain("optimum undefined for a singular mixture".into()))?
        }
    };
    let dist = |v: &DMatrix<f64>| optimum.as_ref().map_or(f64::NAN, |o| frobenius_sq(&(v - o)).sqrt());

    let mut trace = TrainTrace {
        losses: Vec::new(),
        grad_norms: Vec::new(),
        dist_to_opt: Vec::new(),
        v31: DMatrix::zeros(d, d),
        params: None,
        eta,
        iterations: 0,
        converged: false,
    };
    let mut loss = model.loss(&v)?;
    loop {
        let g = model.grad(&v)?;
        let gnorm = frobenius_sq(&g).sqrt();
        trace.losses.push(loss);
        trace.grad_norms.push(gnorm);
        trace.dist_to_opt.push(dist(&v));
        if !gnorm.is_finite() || !loss.is_finite() {
            return Err(Error::NonFinite(format!("population loss at iteration {}", trace.iterations)));
        }
        if gnorm <= config.tol {
            trace.converged = true;
            break;
        }
        if trace.iterations >= config.iters {
            break;
        }
        v -= g * eta;
        trace.iterations += 1;
        let next = model.loss(&v)?;
        if next > loss + 1e-12 * loss.abs().max(1.0) {
            return Err(Error::Divergence { eta, iteration: trace.iterations, previous: loss, current: next });
        }
        loss = next;
    }
    trace.v31 = v;
    Ok(trace)
}
