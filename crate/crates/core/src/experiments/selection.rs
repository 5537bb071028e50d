//! Task selection over four families of power-law tasks.

use serde::Serialize;

use super::{ExperimentOutput, RunRecord, Settings, Table, Timer};
use crate::error::Result;
use crate::rng;
use crate::select::{
    estimate_epsilon, hard_task_mass, selection_rows, solve_selection, spearman, HardTaskMass, SelectionProblem,
    SelectionResult, SigmaMinRule,
};
use crate::task::{power_law_spectrum, CovarianceSpec, FrameMode, TaskFamilySpec};

const LABEL_FAMILY: u64 = 10;
const LABEL_TARGET: u64 = 99;

/// `Easy`/`Hard` by exponent and `Short`/`Long` by support for the 2×2 grid,
/// an explicit `alpha=…,B=…` tag otherwise.
pub fn type_label(alphas: &[f64], supports: &[usize], ai: usize, bi: usize) -> String {
    if alphas.len() == 2 && supports.len() == 2 && alphas[0] < alphas[1] && supports[0] < supports[1] {
        format!("{}-{}", ["Easy", "Hard"][ai], ["Short", "Long"][bi])
    } else {
        format!("alpha={},B={}", alphas[ai], supports[bi])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TypeAverage {
    pub type_label: String,
    pub alpha: f64,
    pub support: usize,
    pub count: usize,
    pub mean_pi: f64,
    pub mean_hardness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectSummary {
    pub result: SelectionResult,
    pub averages: Vec<TypeAverage>,
    pub spearman: f64,
    pub epsilon: f64,
    pub hard_mass: HardTaskMass,
    /// Same diagnostic with `σ_min` read as the smallest eigenvalue.
    pub hard_mass_literal: HardTaskMass,
    pub problem: SelectionProblem,
}

impl SelectSummary {
    pub fn mean_pi(&self, label: &str) -> Option<f64> {
        self.averages.iter().find(|a| a.type_label == label).map(|a| a.mean_pi)
    }

    /// Qualitative outcome: hard beats easy at every support, the hardest
    /// family beats the easiest, selection is positively rank-correlated with
    /// hardness, at least half the mass is on hard tasks, and the solver
    /// improved on uniform weights.
    pub fn checks(&self) -> Vec<(String, bool)> {
        let mut out = Vec::new();
        let by = |alpha: f64, support: usize| {
            self.averages.iter().find(|a| a.alpha == alpha && a.support == support).map(|a| a.mean_pi)
        };
        let mut alphas: Vec<f64> = self.averages.iter().map(|a| a.alpha).collect();
        alphas.sort_by(f64::total_cmp);
        alphas.dedup();
        let mut supports: Vec<usize> = self.averages.iter().map(|a| a.support).collect();
        supports.sort();
        supports.dedup();
        if alphas.len() >= 2 {
            let (easy, hard) = (alphas[0], alphas[alphas.len() - 1]);
            for &b in &supports {
                if let (Some(h), Some(e)) = (by(hard, b), by(easy, b)) {
                    out.push((format!("avg pi hard > easy at B={b} ({h:.4e} vs {e:.4e})"), h > e));
                }
            }
            if supports.len() >= 2 {
                let (short, long) = (supports[0], supports[supports.len() - 1]);
                if let (Some(hl), Some(es)) = (by(hard, long), by(easy, short)) {
                    out.push((format!("avg pi hardest-longest > easiest-shortest ({hl:.4e} vs {es:.4e})"), hl > es));
                }
                if let (Some(el), Some(es)) = (by(easy, long), by(easy, short)) {
                    out.push((format!("avg pi easy long > easy short ({el:.4e} vs {es:.4e})"), el > es));
                }
            }
        }
        out.push((format!("spearman(pi, hardness) = {:.4} > 0", self.spearman), self.spearman > 0.0));
        out.push((format!("hard task mass = {:.4} >= 0.5", self.hard_mass.mass), self.hard_mass.mass >= 0.5));
        out.push((
            format!(
                "quadratic objective {:.6e} <= uniform {:.6e}",
                self.result.objective_quadratic, self.result.objective_uniform
            ),
            self.result.objective_quadratic <= self.result.objective_uniform,
        ));
        out.push((format!("solver converged after {} iterations", self.result.iterations), self.result.converged));
        out
    }
}

pub fn run_select(settings: &Settings) -> Result<(ExperimentOutput, SelectSummary)> {
    let timer = Timer::start(settings);
    let d = settings.d;
    let mut tasks: Vec<CovarianceSpec> = Vec::new();
    let mut groups = Vec::new();
    for (ai, &alpha) in settings.alphas.iter().enumerate() {
        for (bi, &support) in settings.supports.iter().enumerate() {
            let label = type_label(&settings.alphas, &settings.supports, ai, bi);
            let family = TaskFamilySpec {
                alpha,
                support: settings.scaled_support(support),
                dim: d,
                count: settings.tasks_per_type,
                seed: rng::derive(settings.seed, LABEL_FAMILY + (ai * settings.supports.len() + bi) as u64),
                frames: FrameMode::Thin,
            };
            let start = tasks.len();
            tasks.extend(power_law_spectrum(&family)?.into_iter().map(|t| t.with_label(label.clone())));
            groups.push((label, alpha, family.support, start..tasks.len()));
        }
    }
    let target_family = TaskFamilySpec {
        alpha: settings.target_alpha,
        support: d,
        dim: d,
        count: 1,
        seed: rng::derive(settings.seed, LABEL_TARGET),
        frames: FrameMode::Thin,
    };
    let target = power_law_spectrum(&target_family)?.remove(0).with_label("target");
    let problem = SelectionProblem::new(tasks, target, settings.select_n, settings.select_k)?;
    let result = solve_selection(&problem)?;
    let rows = selection_rows(&problem, &result, SigmaMinRule::Nonzero)?;
    let averages: Vec<TypeAverage> = groups
        .iter()
        .map(|(label, alpha, support, range)| {
            let count = range.len() as f64;
            TypeAverage {
                type_label: label.clone(),
                alpha: *alpha,
                support: *support,
                count: range.len(),
                mean_pi: rows[range.clone()].iter().map(|r| r.pi).sum::<f64>() / count,
                mean_hardness: rows[range.clone()].iter().map(|r| r.hardness).sum::<f64>() / count,
            }
        })
        .collect();
    let pis: Vec<f64> = rows.iter().map(|r| r.pi).collect();
    let hards: Vec<f64> = rows.iter().map(|r| r.hardness).collect();
    let rho = spearman(&pis, &hards)?;
    let epsilon = estimate_epsilon(&problem.tasks, &result.pi, &problem.target)?;
    let hard_mass = hard_task_mass(&problem.tasks, &result.pi, &problem.target, epsilon, SigmaMinRule::Nonzero)?;
    let hard_mass_literal =
        hard_task_mass(&problem.tasks, &result.pi, &problem.target, epsilon, SigmaMinRule::Literal)?;
    let elapsed = timer.elapsed_ms();

    let uniform = vec![1.0 / pis.len() as f64; pis.len()];
    let uniform_nonconvex =
        crate::select::eval_nonconvex_objective(&problem.tasks, &uniform, &problem.target, problem.n, problem.k).ok();
    let record = |run_id: &str, nonconvex: Option<f64>, quadratic: f64| RunRecord {
        experiment: settings.experiment.as_str().into(),
        run_id: run_id.into(),
        seed: settings.seed,
        d,
        n: Some(problem.n),
        m: None,
        k: Some(problem.k),
        hardness: crate::task::hardness(&problem.target).ok(),
        test_error_mean: nonconvex.unwrap_or(f64::NAN),
        test_error_se: None,
        bound_value: Some(quadratic),
        wall_ms: elapsed,
    };
    let records = vec![
        record("selected", result.objective_nonconvex, result.objective_quadratic),
        record("uniform", uniform_nonconvex, result.objective_uniform),
    ];

    let summary_data =
        SelectSummary { result, averages, spearman: rho, epsilon, hard_mass, hard_mass_literal, problem };
    let checks = summary_data.checks();
    let mut summary: Vec<String> = summary_data
        .averages
        .iter()
        .map(|a| format!("{}: mean pi {:.4e}, mean hardness {:.1}", a.type_label, a.mean_pi, a.mean_hardness))
        .collect();
    summary.push(format!(
        "epsilon estimate {:.4e}, hard-set threshold {:.4e}; {} hard tasks by smallest nonzero eigenvalue, {} by smallest eigenvalue (mass {:.4})",
        epsilon,
        summary_data.hard_mass.threshold,
        summary_data.hard_mass.hard_set.len(),
        summary_data.hard_mass_literal.hard_set.len(),
        summary_data.hard_mass_literal.mass
    ));
    summary.extend(checks.iter().map(|(s, ok)| format!("[{}] {s}", if *ok { "ok" } else { "FAIL" })));
    let passed = checks.iter().all(|(_, ok)| *ok);
    let output = ExperimentOutput {
        records,
        tables: vec![Table::from_rows("tasks", &rows)?, Table::from_rows("types", &summary_data.averages)?],
        summary,
        passed: Some(passed),
    };
    Ok((output, summary_data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::ExperimentKind;

    #[test]
    fn labels() {
        assert_eq!(type_label(&[0.2, 0.8], &[20, 100], 1, 0), "Hard-Short");
        assert_eq!(type_label(&[0.2], &[20], 0, 0), "alpha=0.2,B=20");
    }

    #[test]
    fn single_type_gives_uniform_weights() {
        // alpha = 0 with full support makes every task I/d whatever its frame
        let mut s = Settings::defaults(ExperimentKind::Select);
        s.d = 20;
        s.alphas = vec![0.0];
        s.supports = vec![1000];
        s.tasks_per_type = 4;
        let (_, summary) = run_select(&s).unwrap();
        let pi = &summary.result.pi;
        assert!(pi.iter().all(|p| (p - 0.25).abs() < 1e-12), "{pi:?}");
    }
}
