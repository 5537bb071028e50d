//! Seeded end-to-end experiments with a shared CSV record format.
//!
//! Every experiment reads an [`ExperimentConfig`] (all fields optional except
//! `experiment`), resolves it against per-experiment defaults into
//! [`Settings`], and returns [`RunRecord`]s plus any auxiliary tables.

mod curves;
mod selection;
mod verify;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::{make_covariance, spectrum_with_hardness, BasisChoice, CovarianceJson, CovarianceSpec, TaskMixture};
use crate::train::{train_empirical, train_population, TrainConfig, TrainTrace};

pub use curves::{
    minimal_k_table, run_moments, run_overthink, run_scaling, run_tradeoff, trained_gamma, MinimalK, MomentRow,
};
pub use selection::{run_select, type_label, SelectSummary, TypeAverage};
pub use verify::{run_verify, SuiteResult, VerifyReport, SUITES};

pub const MAX_K: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Scaling,
    Tradeoff,
    Overthink,
    Select,
    Verify,
    Moments,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Scaling => "scaling",
            Self::Tradeoff => "tradeoff",
            Self::Overthink => "overthink",
            Self::Select => "select",
            Self::Verify => "verify",
            Self::Moments => "moments",
        }
    }
}

/// JSON configuration. Absent fields take the experiment's defaults (see
/// [`Settings::defaults`]).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Option<ExperimentKind>,
    pub seed: Option<u64>,
    pub d: Option<usize>,
    pub n_list: Option<Vec<usize>>,
    pub m: Option<usize>,
    pub k_max: Option<usize>,
    pub trials: Option<usize>,
    /// Hardness levels as multiples of `d` (the smallest possible hardness).
    pub hardness: Option<Vec<f64>>,
    pub epsilons: Option<Vec<f64>>,
    pub train_iters: Option<usize>,
    pub alphas: Option<Vec<f64>>,
    pub supports: Option<Vec<usize>>,
    pub tasks_per_type: Option<usize>,
    pub target_alpha: Option<f64>,
    pub select_n: Option<usize>,
    pub select_k: Option<usize>,
    pub full_scale: Option<bool>,
    pub inject_bug: Option<bool>,
    pub record_timing: Option<bool>,
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// Fields set in `other` win.
    pub fn merged_with(mut self, other: &ExperimentConfig) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f.clone(); } )* };
        }
        take!(
            experiment,
            seed,
            d,
            n_list,
            m,
            k_max,
            trials,
            hardness,
            epsilons,
            train_iters,
            alphas,
            supports,
            tasks_per_type,
            target_alpha,
            select_n,
            select_k,
            full_scale,
            inject_bug,
            record_timing
        );
        self
    }

    pub fn resolve(&self) -> Result<Settings> {
        let kind = self.experiment.ok_or_else(|| Error::Config("no experiment selected".into()))?;
        let mut s = Settings::defaults(kind);
        if self.full_scale == Some(true) {
            s.full_scale = true;
            if kind == ExperimentKind::Select {
                s.d = 1000;
            }
        }
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { s.$f = v.clone(); } )* };
        }
        set!(
            seed,
            d,
            n_list,
            m,
            k_max,
            trials,
            hardness,
            epsilons,
            train_iters,
            alphas,
            supports,
            tasks_per_type,
            target_alpha,
            select_n,
            select_k,
            inject_bug,
            record_timing
        );
        s.validate()?;
        Ok(s)
    }
}

/// Fully resolved experiment parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub d: usize,
    pub n_list: Vec<usize>,
    pub m: usize,
    pub k_max: usize,
    pub trials: usize,
    pub hardness: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub train_iters: usize,
    pub alphas: Vec<f64>,
    /// Supports at `d = 1000`; rescaled proportionally to `d`.
    pub supports: Vec<usize>,
    pub tasks_per_type: usize,
    pub target_alpha: f64,
    pub select_n: usize,
    pub select_k: usize,
    pub full_scale: bool,
    pub inject_bug: bool,
    pub record_timing: bool,
}

impl Settings {
    pub fn defaults(experiment: ExperimentKind) -> Self {
        let mut s = Self {
            experiment,
            seed: 0,
            d: 10,
            n_list: vec![10, 20, 30],
            m: 10_000,
            k_max: 8,
            trials: 100,
            hardness: vec![1.0, 4.0, 16.0],
            epsilons: vec![1.0, 0.3, 0.1, 0.03, 0.01, 3e-3, 1e-3, 1e-4, 1e-6],
            train_iters: 20_000,
            alphas: vec![0.2, 0.8],
            supports: vec![20, 100],
            tasks_per_type: 50,
            target_alpha: 0.8,
            select_n: 100,
            select_k: 4,
            full_scale: false,
            inject_bug: false,
            record_timing: false,
        };
        match experiment {
            ExperimentKind::Tradeoff => {
                s.k_max = 32;
                s.hardness = vec![4.0];
            }
            ExperimentKind::Overthink => {
                s.n_list = vec![20, 100, 200];
                s.k_max = 16;
            }
            ExperimentKind::Select => s.d = 200,
            ExperimentKind::Moments => {
                s.d = 4;
                s.n_list = vec![3, 8];
                s.trials = 100_000;
            }
            ExperimentKind::Scaling | ExperimentKind::Verify => {}
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || self.m == 0 || self.trials == 0 || self.k_max == 0 {
            return bad("d, m, trials and k_max must be positive".into());
        }
        if self.k_max > MAX_K {
            return bad(format!("k_max = {} exceeds {MAX_K}", self.k_max));
        }
        if self.n_list.is_empty() || self.n_list.contains(&0) {
            return bad("n_list must be nonempty with positive entries".into());
        }
        if self.hardness.iter().any(|h| !(*h >= 1.0)) {
            return bad("hardness multipliers must be at least 1".into());
        }
        if self.epsilons.iter().any(|e| !(*e > 0.0)) {
            return bad("epsilons must be positive".into());
        }
        if self.alphas.is_empty() || self.supports.is_empty() || self.tasks_per_type == 0 {
            return bad("alphas, supports and tasks_per_type must be nonempty".into());
        }
        if self.alphas.iter().chain([&self.target_alpha]).any(|a| !(*a >= 0.0)) {
            return bad("alphas must be nonnegative".into());
        }
        if self.supports.contains(&0) || self.select_n == 0 {
            return bad("supports and select_n must be positive".into());
        }
        Ok(())
    }

    /// Support size at the configured dimension, scaled from `d = 1000`.
    pub fn scaled_support(&self, support: usize) -> usize {
        ((support * self.d) as f64 / 1000.0).round().clamp(1.0, self.d as f64) as usize
    }
}

/// One row of the shared CSV schema. Optional fields serialize as empty cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub run_id: String,
    pub seed: u64,
    pub d: usize,
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub k: Option<usize>,
    pub hardness: Option<f64>,
    pub test_error_mean: f64,
    pub test_error_se: Option<f64>,
    pub bound_value: Option<f64>,
    pub wall_ms: Option<u64>,
}

pub const CSV_HEADER: &str =
    "experiment,run_id,seed,d,n,m,k,hardness,test_error_mean,test_error_se,bound_value,wall_ms";

/// Writes records sorted by `(run_id, n, k)`; the sort is stable, so ties keep
/// production order.
pub fn write_records_csv<W: Write>(records: &[RunRecord], out: W) -> Result<()> {
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.run_id, a.n, a.k).cmp(&(&b.run_id, b.n, b.k)));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER.split(','))?;
    for r in sorted {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// A named auxiliary CSV produced alongside the records.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub csv: String,
}

impl Table {
    pub fn from_rows<T: Serialize>(name: &str, rows: &[T]) -> Result<Self> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(Self { name: name.into(), csv: String::from_utf8(bytes).expect("csv output is utf-8") })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub records: Vec<RunRecord>,
    pub tables: Vec<Table>,
    /// Human-readable one-line findings.
    pub summary: Vec<String>,
    /// `Some(false)` when a check built into the experiment failed.
    pub passed: Option<bool>,
}

impl ExperimentOutput {
    pub fn records_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        write_records_csv(&self.records, &mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

pub fn run(settings: &Settings) -> Result<ExperimentOutput> {
    match settings.experiment {
        ExperimentKind::Scaling => run_scaling(settings),
        ExperimentKind::Tradeoff => run_tradeoff(settings),
        ExperimentKind::Overthink => run_overthink(settings),
        ExperimentKind::Select => run_select(settings).map(|(out, _)| out),
        ExperimentKind::Verify => run_verify(settings).map(|r| r.into_output(settings)),
        ExperimentKind::Moments => run_moments(settings),
    }
}

/// A standalone training run: `covariance` if given, otherwise a spectrum of
/// dimension `d` and hardness `hardness · d` with a basis drawn from the
/// training seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    pub train: TrainConfig,
    #[serde(default)]
    pub empirical: bool,
    #[serde(default)]
    pub covariance: Option<CovarianceJson>,
    #[serde(default = "default_train_d")]
    pub d: usize,
    #[serde(default = "default_train_hardness")]
    pub hardness: f64,
}

fn default_train_d() -> usize {
    10
}

fn default_train_hardness() -> f64 {
    1.0
}

impl TrainJob {
    pub fn covariance(&self) -> Result<CovarianceSpec> {
        match &self.covariance {
            Some(json) => CovarianceSpec::from_json(json),
            None => {
                let eigs = spectrum_with_hardness(self.d, self.d as f64, self.hardness * self.d as f64)?;
                make_covariance(&eigs, BasisChoice::Seed(self.train.seed))
            }
        }
    }
}

pub fn run_train(job: &TrainJob) -> Result<TrainTrace> {
    job.train.validate()?;
    let mixture = TaskMixture::single(job.covariance()?);
    if job.empirical {
        train_empirical(&mixture, &job.train)
    } else {
        train_population(&mixture, &job.train)
    }
}

pub(crate) struct Timer {
    start: Option<std::time::Instant>,
}

impl Timer {
    pub(crate) fn start(settings: &Settings) -> Self {
        Self { start: settings.record_timing.then(std::time::Instant::now) }
    }

    pub(crate) fn elapsed_ms(&self) -> Option<u64> {
        self.start.map(|s| s.elapsed().as_millis() as u64)
    }
}
