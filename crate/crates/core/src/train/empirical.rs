//! Empirical loss over a fixed pool of prompts and minibatch training.
//!
//! With `ŵ₀ = 0` the last embedding column is the unit vector `e`, so the
//! output's last column is `e + V G W e` where `G = E Eᵀ / n`. Per prompt:
//! `r = e + V G W e − (0, 0, w, 1)`, `∇_V = r (G W e)ᵀ`, `∇_W = (G Vᵀ r) eᵀ`.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;

use super::{InitKind, Optimizer, ParamMode, StepSize, TrainConfig, TrainTrace};
use crate::error::{Error, Result};
use crate::linalg::frobenius_sq;
use crate::lsa::LsaParams;
use crate::prompt::{build_train_embedding, sample_prompt_with, PromptBatch};
use crate::rng;
use crate::task::{sample_mixture_columns, CovarianceSpec, TaskMixture};

use super::population::PopulationModel;

const POOL_STREAM: u64 = 0x706f_6f6c; // "pool"

/// `count` prompts; prompt `i` uses stream `i`. Under a mixture every column
/// picks its task independently by the weights.
pub fn sample_prompt_pool(mixture: &TaskMixture, n: usize, count: usize, seed: u64) -> Result<Vec<PromptBatch>> {
    let base = rng::derive(seed, POOL_STREAM);
    if mixture.is_single() {
        return (0..count)
            .map(|i| sample_prompt_with(&mixture.tasks[0], n, &mut rng::stream(base, i as u64)))
            .collect();
    }
    let factors: Vec<DMatrix<f64>> = mixture.tasks.iter().map(CovarianceSpec::sqrt_factor).collect();
    let picker = WeightedIndex::new(&mixture.weights).map_err(|e| Error::Domain(e.to_string()))?;
    (0..count)
        .map(|i| {
            let mut r = rng::stream(base, i as u64);
            let w = crate::linalg::standard_normal_vector(mixture.dim(), &mut r);
            let x = sample_mixture_columns(&factors, Some(&picker), n, &mut r);
            PromptBatch::from_parts(x, w, "mixture")
        })
        .collect()
}

struct Prepared {
    gram: DMatrix<f64>,
    target: DVector<f64>,
}

fn prepare(prompts: &[PromptBatch]) -> Result<Vec<Prepared>> {
    let first = prompts.first().ok_or_else(|| Error::Domain("empirical loss needs at least one prompt".into()))?;
    let (d, n) = (first.dim(), first.len());
    prompts
        .iter()
        .map(|p| {
            if p.dim() != d || p.len() != n {
                return Err(Error::Dimension {
                    context: "prompt pool",
                    expected: format!("d={d}, n={n}"),
                    actual: format!("d={}, n={}", p.dim(), p.len()),
                });
            }
            let e = build_train_embedding(p, &DVector::zeros(d))?;
            let gram = (&e.matrix * e.matrix.transpose()) / n as f64;
            let mut target = DVector::zeros(2 * d + 2);
            target.rows_mut(d + 1, d).copy_from(&p.w);
            target[2 * d + 1] = 1.0;
            Ok(Prepared { gram, target })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct EmpiricalGrad {
    pub loss: f64,
    pub grad_v: DMatrix<f64>,
    pub grad_w: DMatrix<f64>,
}

fn batch_grad(params: &LsaParams, batch: &[Prepared]) -> EmpiricalGrad {
    let size = 2 * params.d + 2;
    let last = size - 1;
    let we = params.w.column(last).into_owned();
    let mut e = DVector::zeros(size);
    e[last] = 1.0;
    let mut grad_v = DMatrix::zeros(size, size);
    let mut wcol = DVector::zeros(size);
    let mut loss = 0.0;
    let mut h = DVector::zeros(size);
    let mut r = DVector::zeros(size);
    let mut u = DVector::zeros(size);
    let vt = params.v.transpose();
    for p in batch {
        h.gemv(1.0, &p.gram, &we, 0.0);
        r.copy_from(&e);
        r.gemv(1.0, &params.v, &h, 1.0);
        r -= &p.target;
        loss += 0.5 * r.norm_squared();
        grad_v.ger(1.0, &r, &h, 1.0);
        u.gemv(1.0, &vt, &r, 0.0);
        wcol.gemv(1.0, &p.gram, &u, 1.0);
    }
    let b = batch.len() as f64;
    let mut grad_w = DMatrix::zeros(size, size);
    grad_w.set_column(last, &(wcol / b));
    EmpiricalGrad { loss: loss / b, grad_v: grad_v / b, grad_w }
}

/// `(1/2B) Σ_τ ‖f(E_τ)[:, −1] − (0_d, 0, w_τ, 1)‖²` with `ρ = n`.
pub fn empirical_loss(params: &LsaParams, prompts: &[PromptBatch]) -> Result<f64> {
    Ok(empirical_grad(params, prompts)?.loss)
}

pub fn empirical_grad(params: &LsaParams, prompts: &[PromptBatch]) -> Result<EmpiricalGrad> {
    let prepared = prepare(prompts)?;
    if prompts[0].dim() != params.d {
        return Err(Error::Dimension {
            context: "empirical loss",
            expected: params.d.to_string(),
            actual: prompts[0].dim().to_string(),
        });
    }
    Ok(batch_grad(params, &prepared))
}

struct Adam {
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            m: shapes.iter().map(|&(r, c)| DMatrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| DMatrix::zeros(r, c)).collect(),
            t: 0,
        }
    }

    fn step(&mut self, lr: f64, params: &mut [&mut DMatrix<f64>], grads: &[DMatrix<f64>]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.m[i] = &self.m[i] * Self::BETA1 + g * (1.0 - Self::BETA1);
            self.v[i] = &self.v[i] * Self::BETA2 + g.component_mul(g) * (1.0 - Self::BETA2);
            for k in 0..p.len() {
                let mhat = self.m[i][k] / c1;
                let vhat = self.v[i][k] / c2;
                p[k] -= lr * mhat / (vhat.sqrt() + Self::EPS);
            }
        }
    }
}

/// Minibatch training on a fixed pool of `config.pool` prompts, one pass per
/// epoch in batches of `config.batch`, for `config.iters` epochs.
pub fn train_empirical(mixture: &TaskMixture, config: &TrainConfig) -> Result<TrainTrace> {
    config.validate()?;
    let d = mixture.dim();
    let model = PopulationModel::new(mixture, config.n, config.c)?;
    let optimum = model.optimum();
    let prompts = sample_prompt_pool(mixture, config.n, config.pool, config.seed)?;
    let prepared = prepare(&prompts)?;

    let v31 = match config.init {
        InitKind::Zero => DMatrix::zeros(d, d),
        InitKind::Optimum => {
            optimum.clone().ok_or_else(|| Error::Domain("optimum undefined for a singular mixture".into()))?
        }
    };
    let mut params = LsaParams::structured(&v31, config.c)?;
    if config.mode == ParamMode::Full {
        params.structured = false;
    }
    let lr = match (config.eta, config.optimizer) {
        (StepSize::Fixed(e), _) => e,
        (StepSize::Auto, Optimizer::AdamLike) => 1e-3,
        (StepSize::Auto, Optimizer::Gd) => model.auto_step(),
    };
    let size = 2 * d + 2;
    let mut adam = match config.mode {
        ParamMode::Structured => Adam::new(&[(d, d)]),
        ParamMode::Full => Adam::new(&[(size, size), (size, size)]),
    };

    let mut trace = TrainTrace {
        losses: Vec::new(),
        grad_norms: Vec::new(),
        dist_to_opt: Vec::new(),
        v31: DMatrix::zeros(d, d),
        params: None,
        eta: lr,
        iterations: 0,
        converged: false,
    };
    let dist = |p: &LsaParams| optimum.as_ref().map_or(f64::NAN, |o| frobenius_sq(&(p.v31() - o)).sqrt());

    for epoch in 0..config.iters {
        let mut epoch_loss = 0.0;
        let mut last_norm = 0.0;
        let mut batches = 0;
        for chunk in prepared.chunks(config.batch) {
            let g = batch_grad(&params, chunk);
            if !g.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "empirical loss became {} at epoch {epoch}, batch {batches} (lr = {lr:e})",
                    g.loss
                )));
            }
            epoch_loss += g.loss;
            batches += 1;
            match config.mode {
                ParamMode::Structured => {
                    let gv31 = g.grad_v.view((d + 1, 0), (d, d)).into_owned();
                    last_norm = frobenius_sq(&gv31).sqrt();
                    let mut v31 = params.v31();
                    match config.optimizer {
                        Optimizer::Gd => v31 -= gv31 * lr,
                        Optimizer::AdamLike => adam.step(lr, &mut [&mut v31], &[gv31]),
                    }
                    params.v.view_mut((d + 1, 0), (d, d)).copy_from(&v31);
                }
                ParamMode::Full => {
                    last_norm = (frobenius_sq(&g.grad_v) + frobenius_sq(&g.grad_w)).sqrt();
                    match config.optimizer {
                        Optimizer::Gd => {
                            params.v -= &g.grad_v * lr;
                            params.w -= &g.grad_w * lr;
                        }
                        Optimizer::AdamLike => {
                            adam.step(lr, &mut [&mut params.v, &mut params.w], &[g.grad_v, g.grad_w]);
                        }
                    }
                }
            }
        }
        trace.losses.push(epoch_loss / batches as f64);
        trace.grad_norms.push(last_norm);
        trace.dist_to_opt.push(dist(&params));
        trace.iterations = epoch + 1;
        if last_norm <= config.tol {
            trace.converged = true;
            break;
        }
    }
    trace.v31 = params.v31();
    trace.params = Some(params);
    Ok(trace)
}
