//! Losses, gradients and training loops for the LSA layer.

mod empirical;
mod population;
mod support;

pub use empirical::{empirical_grad, empirical_loss, sample_prompt_pool, train_empirical, EmpiricalGrad};
pub use population::{population_grad, population_loss, train_population, PopulationModel};
pub use support::{
    check_support_invariance, check_support_invariance_from, exact_population_gradient, ExactGradient, SupportReport,
    SupportStep, Violation,
};

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    Auto,
    Fixed(f64),
}

impl Serialize for StepSize {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            StepSize::Auto => s.serialize_str("auto"),
            StepSize::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for StepSize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(StepSize::Fixed(v)),
            Raw::Text(t) if t == "auto" => Ok(StepSize::Auto),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("step size must be a number or \"auto\", got {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Gd,
    AdamLike,
}

/// Which entries the empirical trainer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamMode {
    /// Only `V₃₁`; `W` frozen at its structured value.
    Structured,
    /// Every entry of `V` and `W`.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    Zero,
    /// The closed-form optimum `V₃₁ = −Γ⁻¹/c`.
    Optimum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub n: usize,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_eta")]
    pub eta: StepSize,
    /// Iterations for population training, epochs for empirical training.
    pub iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_pool")]
    pub pool: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
    #[serde(default = "default_mode")]
    pub mode: ParamMode,
    #[serde(default = "default_init")]
    pub init: InitKind,
    #[serde(default)]
    pub seed: u64,
}

fn default_c() -> f64 {
    1.0
}
fn default_eta() -> StepSize {
    StepSize::Auto
}
fn default_tol() -> f64 {
    1e-10
}
fn default_batch() -> usize {
    1000
}
fn default_pool() -> usize {
    5000
}
fn default_optimizer() -> Optimizer {
    Optimizer::Gd
}
fn default_mode() -> ParamMode {
    ParamMode::Structured
}
fn default_init() -> InitKind {
    InitKind::Zero
}

impl TrainConfig {
    pub fn population(n: usize, c: f64, iters: usize) -> Self {
        Self {
            n,
            c,
            eta: StepSize::Auto,
            iters,
            tol: default_tol(),
            batch: default_batch(),
            pool: default_pool(),
            optimizer: Optimizer::Gd,
            mode: ParamMode::Structured,
            init: InitKind::Zero,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if !(self.c != 0.0) || !self.c.is_finite() {
            return Err(Error::Config(format!("c = {} must be nonzero", self.c)));
        }
        if let StepSize::Fixed(eta) = self.eta {
            if !(eta >= 0.0) || !eta.is_finite() {
                return Err(Error::Config(format!("eta = {eta} must be a nonnegative number")));
            }
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol = {} must be positive", self.tol)));
        }
        if self.batch == 0 || self.pool == 0 {
            return Err(Error::Config("batch and pool sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    /// Frobenius distance of `V₃₁` to the closed-form optimum, `NaN` when it is undefined.
    pub dist_to_opt: Vec<f64>,
    pub v31: DMatrix<f64>,
    /// Full parameters at the end of empirical training.
    pub params: Option<crate::lsa::LsaParams>,
    pub eta: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl TrainTrace {
    /// CSV with header `iter,loss,grad_norm,dist_to_opt`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iter", "loss", "grad_norm", "dist_to_opt"])?;
        for (i, ((l, g), d)) in self.losses.iter().zip(&self.grad_norms).zip(&self.dist_to_opt).enumerate() {
            let dist = if d.is_nan() { String::new() } else { d.to_string() };
            w.write_record([i.to_string(), l.to_string(), g.to_string(), dist])?;
        }
        w.flush()?;
        Ok(())
    }
}
