//! Property suites bundled into one pass/fail report.

use serde::Serialize;

use super::{ExperimentOutput, RunRecord, Settings, Table};
use crate::bounds::{bound_cot_leading, bound_direct, bound_multitask};
use crate::cot::{closed_form_k_step, cot_rollout, cot_rollout_lsa, mc_test_error, mc_test_error_curve};
use crate::error::Result;
use crate::linalg;
use crate::lsa::optimal_params;
use crate::prompt::sample_prompt;
use crate::rng;
use crate::task::{
    fourth_moment_closed_mixture, fourth_moment_mc, gamma_multi, gamma_single, random_spd, CovarianceSpec, GammaMatrix,
    TaskMixture,
};
use crate::train::{check_support_invariance, train_population, TrainConfig};

pub const SUITES: [&str; 5] = ["convergence", "equivalence", "moments", "support", "dominance"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub suite: String,
    pub passed: bool,
    /// Worst observed value of the suite's statistic.
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn into_output(self, settings: &Settings) -> ExperimentOutput {
        let records = self
            .suites
            .iter()
            .map(|s| RunRecord {
                experiment: "verify".into(),
                run_id: s.suite.clone(),
                seed: settings.seed,
                d: settings.d,
                n: None,
                m: None,
                k: None,
                hardness: None,
                test_error_mean: s.measured,
                test_error_se: None,
                bound_value: Some(s.threshold),
                wall_ms: None,
            })
            .collect();
        let summary = self
            .suites
            .iter()
            .map(|s| {
                format!(
                    "[{}] {}: measured {:.3e} vs threshold {:.3e} ({})",
                    if s.passed { "pass" } else { "FAIL" },
                    s.suite,
                    s.measured,
                    s.threshold,
                    s.detail
                )
            })
            .collect();
        let passed = self.passed();
        let table = Table::from_rows("report", &self.suites).expect("report rows serialize");
        ExperimentOutput { records, tables: vec![table], summary, passed: Some(passed) }
    }
}

fn suite(name: &str, measured: f64, threshold: f64, detail: String) -> SuiteResult {
    SuiteResult { suite: name.into(), passed: measured <= threshold, measured, threshold, detail }
}

fn convergence(seed: u64) -> Result<SuiteResult> {
    let mut rng = rng::stream(rng::derive(seed, 1), 0);
    let mut worst: f64 = 0.0;
    let cases = [(2, 4), (4, 16), (3, 8)];
    for &(d, n) in &cases {
        let cov = random_spd(d, 0.5, 2.0, &mut rng);
        let trace = train_population(&TaskMixture::single(cov), &TrainConfig::population(n, 1.0, 50_000))?;
        worst = worst.max(*trace.dist_to_opt.last().unwrap_or(&f64::INFINITY));
    }
    let tasks: Vec<CovarianceSpec> = (0..3).map(|_| random_spd(3, 0.5, 2.0, &mut rng)).collect();
    let mixture = TaskMixture::new(tasks, vec![0.5, 0.3, 0.2])?;
    let trace = train_population(&mixture, &TrainConfig::population(6, 1.0, 50_000))?;
    worst = worst.max(*trace.dist_to_opt.last().unwrap_or(&f64::INFINITY));
    Ok(suite(
        "convergence",
        worst,
        1e-6,
        format!("{} single-task and 1 mixture run, Frobenius distance to optimum", cases.len()),
    ))
}

fn equivalence(seed: u64) -> Result<SuiteResult> {
    let mut worst: f64 = 0.0;
    for i in 0..10u64 {
        let mut rng = rng::stream(rng::derive(seed, 2), i);
        let cov = random_spd(4, 0.5, 2.0, &mut rng);
        let gamma = gamma_single(&cov, 10)?;
        let prompt = sample_prompt(&cov, 30, rng::derive(seed, 20 + i))?;
        for k in [1usize, 8, 64] {
            let r = cot_rollout(&prompt, &gamma, k)?;
            let cf = closed_form_k_step(&gamma, &prompt.sample_covariance(), k, &prompt.w)?;
            worst = worst.max((&r.final_estimate - &cf).norm() / cf.norm());
        }
        let params = optimal_params(&gamma, 1.0)?;
        let a = cot_rollout(&prompt, &gamma, 5)?;
        let b = cot_rollout_lsa(&prompt, &params, 5)?;
        worst = worst.max((a.final_estimate - b.final_estimate).norm());
    }
    Ok(suite("equivalence", worst, 1e-9, "rollout vs closed form and vs forward-pass rollout, 10 instances".into()))
}

fn moments(seed: u64) -> Result<SuiteResult> {
    let mut worst: f64 = 0.0;
    for i in 0..4u64 {
        let mut rng = rng::stream(rng::derive(seed, 3), i);
        let mixture = if i % 2 == 0 {
            TaskMixture::single(random_spd(3, 0.5, 2.0, &mut rng))
        } else {
            TaskMixture::new((0..2).map(|_| random_spd(3, 0.5, 2.0, &mut rng)).collect(), vec![0.6, 0.4])?
        };
        let a = linalg::standard_normal_matrix(3, 3, &mut rng);
        let closed = fourth_moment_closed_mixture(&mixture, &a, 5)?;
        let est = fourth_moment_mc(&mixture, &a, 5, 20_000, rng::derive(seed, 30 + i))?;
        worst = worst.max(est.max_z_score(&closed));
    }
    Ok(suite("moments", worst, 5.0, "max z-score of closed form against 2e4-sample Monte Carlo, 4 instances".into()))
}

fn support(seed: u64) -> Result<SuiteResult> {
    let mut rng = rng::stream(rng::derive(seed, 4), 0);
    let cov = random_spd(3, 0.5, 2.0, &mut rng);
    let report = check_support_invariance(&cov, 6, 1.0, 5)?;
    let worst = report.steps.iter().map(|s| s.max_off_v.max(s.max_off_w)).fold(0.0, f64::max);
    Ok(suite("support", worst, 1e-8, "largest off-pattern gradient entry over 5 exact steps".into()))
}

/// Relative slack allowed between the Monte Carlo error and the leading term
/// once `m` is large enough for the finite-sample correction to be negligible.
const LEADING_TOL: f64 = 0.05;

/// Largest ratio `MC / bound` over the direct, leading-term and multi-task
/// bounds; passes at ratio ≤ 1. With `inject_bug` the sign of `Γ` is flipped
/// before the Monte Carlo runs.
fn dominance(seed: u64, inject_bug: bool) -> Result<SuiteResult> {
    let flip = |g: GammaMatrix| -> GammaMatrix {
        if inject_bug {
            GammaMatrix { matrix: -g.matrix, ..g }
        } else {
            g
        }
    };
    let trials = 400;
    let (mut direct, mut leading, mut multi) = (0.0f64, 0.0f64, 0.0f64);
    let mut rng = rng::stream(rng::derive(seed, 5), 0);
    for (i, &(n, m)) in [(50, 50), (100, 200), (200, 100)].iter().enumerate() {
        let cov = random_spd(10, 0.5, 2.0, &mut rng);
        let gamma = flip(gamma_single(&cov, n)?);
        let mc = mc_test_error(&gamma, &cov, m, 1, trials, rng::derive(seed, 50 + i as u64))?;
        direct = direct.max(mc.mean / bound_direct(&cov, n, m)?.value);
    }
    // The leading term is the large-m limit; at m = 10⁴k²d the expected error
    // must sit within LEADING_TOL of it.
    let cov = random_spd(4, 0.5, 2.0, &mut rng);
    let k_max = 4;
    let gamma = flip(gamma_single(&cov, 20)?);
    for k in 1..=k_max {
        let m = 10_000 * k * k * 4;
        let curve = mc_test_error_curve(&gamma, &cov, m, k, trials, rng::derive(seed, 60 + k as u64))?;
        let ratio = curve[k].mean / bound_cot_leading(&cov, 20, k)?.value;
        leading = leading.max(ratio / (1.0 + LEADING_TOL));
    }
    let m = 100 * k_max * k_max * 4;
    let tasks: Vec<CovarianceSpec> = (0..3).map(|_| random_spd(4, 0.5, 2.0, &mut rng)).collect();
    let target = random_spd(4, 0.5, 2.0, &mut rng);
    let gamma = flip(gamma_multi(&tasks, &[0.4, 0.4, 0.2], 20)?);
    let curve = mc_test_error_curve(&gamma, &target, m, k_max, trials, rng::derive(seed, 70))?;
    for (k, p) in curve.iter().enumerate().skip(1) {
        multi = multi.max(p.mean / bound_multitask(&gamma_multi(&tasks, &[0.4, 0.4, 0.2], 20)?, &target, k)?.value);
    }
    let detail = format!(
        "largest MC / bound ratio: direct {direct:.3}, multi-task {multi:.3e}; leading-term limit {leading:.3} (ratio / 1.05){}",
        if inject_bug { "; sign of Γ flipped (negative control)" } else { "" }
    );
    Ok(suite("dominance", direct.max(leading).max(multi), 1.0, detail))
}

pub fn run_verify(settings: &Settings) -> Result<VerifyReport> {
    let seed = settings.seed;
    let suites = vec![
        convergence(seed)?,
        equivalence(seed)?,
        moments(seed)?,
        support(seed)?,
        dominance(seed, settings.inject_bug)?,
    ];
    debug_assert_eq!(suites.iter().map(|s| s.suite.as_str()).collect::<Vec<_>>(), SUITES);
    Ok(VerifyReport { suites })
}
