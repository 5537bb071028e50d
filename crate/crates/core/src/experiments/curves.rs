//! Error-versus-depth experiments: scaling, trade-off, overthinking, and the
//! moment-identity check.

use nalgebra::DMatrix;
use serde::Serialize;

use super::{ExperimentOutput, RunRecord, Settings, Table, Timer};
use crate::bounds::bound_cot_leading;
use crate::cot::{mc_test_error_curve, ErrorEstimate};
use crate::error::Result;
use crate::linalg;
use crate::rng;
use crate::task::{
    fourth_moment_closed_mixture, fourth_moment_mc, gamma_single, hardness, make_covariance, random_spd,
    spectrum_with_hardness, BasisChoice, CovarianceSpec, GammaMatrix, GammaProvenance, TaskMixture,
};
use crate::train::{train_population, TrainConfig};

const LABEL_SPECTRUM: u64 = 1;
const LABEL_TEST: u64 = 2;
const LABEL_MOMENTS: u64 = 3;

/// Preconditioner implied by trained parameters: the layer applies
/// `c V₃₁ = −Γ⁻¹`, so `Γ = −(c V₃₁)⁻¹`.
pub fn trained_gamma(v31: &DMatrix<f64>, c: f64, n: usize) -> Result<GammaMatrix> {
    let inv = linalg::inverse(&(v31 * -c), "trained c·V₃₁")?;
    GammaMatrix::from_matrix(inv, GammaProvenance::SingleTask { n })
}

fn train_gamma(cov: &CovarianceSpec, n: usize, settings: &Settings) -> Result<GammaMatrix> {
    let config = TrainConfig::population(n, 1.0, settings.train_iters);
    let trace = train_population(&TaskMixture::single(cov.clone()), &config)?;
    trained_gamma(&trace.v31, config.c, n)
}

struct Curve<'a> {
    run_id: String,
    n: usize,
    cov: &'a CovarianceSpec,
    points: Vec<ErrorEstimate>,
    elapsed: Option<u64>,
}

fn records_for(settings: &Settings, curve: &Curve, with_bound: bool) -> Result<Vec<RunRecord>> {
    let h = hardness(curve.cov)?;
    curve
        .points
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let bound_value = if with_bound { Some(bound_cot_leading(curve.cov, curve.n, k)?.value) } else { None };
            Ok(RunRecord {
                experiment: settings.experiment.as_str().into(),
                run_id: curve.run_id.clone(),
                seed: settings.seed,
                d: settings.d,
                n: Some(curve.n),
                m: Some(settings.m),
                k: Some(k),
                hardness: Some(h),
                test_error_mean: p.mean,
                test_error_se: Some(p.std_err),
                bound_value,
                wall_ms: curve.elapsed,
            })
        })
        .collect()
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn means(points: &[ErrorEstimate]) -> Vec<f64> {
    points.iter().map(|p| p.mean).collect()
}

fn covariance_with_hardness(settings: &Settings, multiplier: f64, index: usize) -> Result<CovarianceSpec> {
    let d = settings.d;
    let eigs = spectrum_with_hardness(d, d as f64, multiplier * d as f64)?;
    let basis = BasisChoice::Seed(rng::derive(rng::derive(settings.seed, LABEL_SPECTRUM), index as u64));
    Ok(make_covariance(&eigs, basis)?.with_label(format!("hardness={}", multiplier * d as f64)))
}

/// Error against `k` for every `(n, hardness)` with the closed-form
/// preconditioner, next to the leading-term bound. Each hardness level reuses
/// the same test prompts across `n`.
pub fn run_scaling(settings: &Settings) -> Result<ExperimentOutput> {
    let mut records = Vec::new();
    let mut summary = Vec::new();
    let mut passed = true;
    for (hi, &mult) in settings.hardness.iter().enumerate() {
        let cov = covariance_with_hardness(settings, mult, hi)?;
        let mc_seed = rng::derive(rng::derive(settings.seed, LABEL_TEST), hi as u64);
        let mut previous: Option<Vec<f64>> = None;
        for &n in &settings.n_list {
            let timer = Timer::start(settings);
            let gamma = gamma_single(&cov, n)?;
            let points = mc_test_error_curve(&gamma, &cov, settings.m, settings.k_max, settings.trials, mc_seed)?;
            let curve = Curve { run_id: cov.label.clone(), n, cov: &cov, points, elapsed: timer.elapsed_ms() };
            records.extend(records_for(settings, &curve, true)?);
            let m = means(&curve.points);
            let decreasing = strictly_decreasing(&m);
            let below = previous.as_ref().is_none_or(|p| m.iter().zip(p).skip(1).all(|(a, b)| a < b));
            passed &= decreasing && below;
            summary.push(format!(
                "{} n={n}: error {:.4e} -> {:.4e} over k=0..{}, decreasing={decreasing}, below smaller n={below}",
                cov.label, m[0], m[settings.k_max], settings.k_max
            ));
            previous = Some(m);
        }
    }
    Ok(ExperimentOutput { records, tables: Vec::new(), summary, passed: Some(passed) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinimalK {
    pub n: usize,
    pub epsilon: f64,
    /// Empty when no `k ≤ k_max` reaches `epsilon`.
    pub min_k: Option<usize>,
}

/// Smallest `k` whose mean error is at most each `ε`, per `n`.
pub fn minimal_k_table(curves: &[(usize, Vec<f64>)], epsilons: &[f64]) -> Vec<MinimalK> {
    let mut rows = Vec::new();
    for &epsilon in epsilons {
        for (n, errors) in curves {
            let min_k = errors.iter().position(|&e| e <= epsilon);
            rows.push(MinimalK { n: *n, epsilon, min_k });
        }
    }
    rows
}

/// True when, for every `ε`, the minimal `k` never grows with `n`
/// (unreachable counts as infinite).
fn non_increasing_in_n(rows: &[MinimalK]) -> bool {
    let key = |r: &MinimalK| r.min_k.unwrap_or(usize::MAX);
    rows.chunk_by(|a, b| a.epsilon == b.epsilon).all(|group| {
        let mut sorted: Vec<&MinimalK> = group.iter().collect();
        sorted.sort_by_key(|r| r.n);
        sorted.windows(2).all(|w| key(w[1]) <= key(w[0]))
    })
}

/// Trains one layer per `n`, rolls out CoT on the training distribution and
/// tabulates the smallest depth reaching each target error.
pub fn run_tradeoff(settings: &Settings) -> Result<ExperimentOutput> {
    let mut records = Vec::new();
    let mut summary = Vec::new();
    let mut tables = Vec::new();
    let mut passed = true;
    for (hi, &mult) in settings.hardness.iter().enumerate() {
        let cov = covariance_with_hardness(settings, mult, hi)?;
        let mc_seed = rng::derive(rng::derive(settings.seed, LABEL_TEST), hi as u64);
        let mut curves = Vec::new();
        for &n in &settings.n_list {
            let timer = Timer::start(settings);
            let gamma = train_gamma(&cov, n, settings)?;
            let points = mc_test_error_curve(&gamma, &cov, settings.m, settings.k_max, settings.trials, mc_seed)?;
            let curve = Curve { run_id: cov.label.clone(), n, cov: &cov, points, elapsed: timer.elapsed_ms() };
            records.extend(records_for(settings, &curve, true)?);
            curves.push((n, means(&curve.points)));
        }
        let table = minimal_k_table(&curves, &settings.epsilons);
        let ok = non_increasing_in_n(&table);
        passed &= ok;
        for row in &table {
            let k = row.min_k.map_or("unreachable".to_string(), |k| k.to_string());
            summary.push(format!("{} eps={:e} n={}: min k {k}", cov.label, row.epsilon, row.n));
        }
        summary.push(format!("{}: minimal k non-increasing in n = {ok}", cov.label));
        let name = if settings.hardness.len() == 1 { "min_k".to_string() } else { format!("min_k_{hi}") };
        tables.push(Table::from_rows(&name, &table)?);
    }
    Ok(ExperimentOutput { records, tables, summary, passed: Some(passed) })
}

/// Eigenvalues proportional to `1/i`, scaled to trace `d`.
fn skewed_covariance(settings: &Settings) -> Result<CovarianceSpec> {
    let d = settings.d;
    let raw: Vec<f64> = (1..=d).map(|i| 1.0 / i as f64).collect();
    let total: f64 = raw.iter().sum();
    let eigs: Vec<f64> = raw.iter().map(|v| v * d as f64 / total).collect();
    let basis = BasisChoice::Seed(rng::derive(settings.seed, LABEL_SPECTRUM));
    Ok(make_covariance(&eigs, basis)?.with_label("skewed-train"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct OverthinkRow {
    n: usize,
    k0: usize,
    overthinks: bool,
    increasing_after_k0: bool,
    control_decreasing: bool,
    final_error: f64,
}

/// Trains on a skewed spectrum and tests on isotropic inputs of the same
/// expected squared norm; the matched test distribution is the control.
pub fn run_overthink(settings: &Settings) -> Result<ExperimentOutput> {
    let train = skewed_covariance(settings)?;
    let test = CovarianceSpec::identity(settings.d).with_label("isotropic-test");
    let mc_seed = rng::derive(settings.seed, LABEL_TEST);
    let mut records = Vec::new();
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &n in &settings.n_list {
        let timer = Timer::start(settings);
        let gamma = train_gamma(&train, n, settings)?;
        let shifted = mc_test_error_curve(&gamma, &test, settings.m, settings.k_max, settings.trials, mc_seed)?;
        let control = mc_test_error_curve(&gamma, &train, settings.m, settings.k_max, settings.trials, mc_seed)?;
        let elapsed = timer.elapsed_ms();
        let shifted_curve = Curve { run_id: "skewed-to-isotropic".into(), n, cov: &test, points: shifted, elapsed };
        let control_curve = Curve { run_id: "matched-control".into(), n, cov: &train, points: control, elapsed };
        records.extend(records_for(settings, &shifted_curve, false)?);
        records.extend(records_for(settings, &control_curve, true)?);
        let m = means(&shifted_curve.points);
        let k0 = m.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map(|(k, _)| k).expect("curve has k = 0");
        let overthinks = k0 < settings.k_max;
        let increasing_after_k0 = overthinks && m[k0..].windows(2).all(|w| w[1] > w[0]);
        let control_decreasing = strictly_decreasing(&means(&control_curve.points));
        summary.push(format!(
            "n={n}: k0={k0}, overthinking={overthinks}, increasing after k0={increasing_after_k0}, error at k={} {:.4e}, control decreasing={control_decreasing}",
            settings.k_max, m[settings.k_max]
        ));
        rows.push(OverthinkRow {
            n,
            k0,
            overthinks,
            increasing_after_k0,
            control_decreasing,
            final_error: m[settings.k_max],
        });
    }
    // without overthinking (matched control) more demonstrations help at every depth
    let benign_order = (1..=settings.k_max).all(|k| {
        let at_k: Vec<f64> = records
            .iter()
            .filter(|r| r.run_id == "matched-control" && r.k == Some(k))
            .map(|r| r.test_error_mean)
            .collect();
        at_k.windows(2).all(|w| w[1] < w[0])
    });
    summary.push(format!("matched control: larger n gives lower error at every k >= 1 = {benign_order}"));
    let over: Vec<&OverthinkRow> = rows.iter().filter(|r| r.overthinks).collect();
    let reversal = over.windows(2).all(|w| w[1].final_error > w[0].final_error);
    let consistent = rows.iter().all(|r| r.control_decreasing) && over.iter().all(|r| r.increasing_after_k0);
    summary.push(format!(
        "{} of {} prompt lengths overthink; larger n worse at k={} among them = {reversal}",
        over.len(),
        rows.len(),
        settings.k_max
    ));
    let passed = !over.is_empty() && consistent && reversal && benign_order;
    Ok(ExperimentOutput { records, tables: vec![Table::from_rows("regimes", &rows)?], summary, passed: Some(passed) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentRow {
    pub instance: String,
    pub n: usize,
    pub trials: usize,
    pub max_z: f64,
    pub max_abs_diff: f64,
}

/// Compares the closed-form `E[S A S]` with Monte Carlo for a single task and
/// a three-task mixture at every `n`. `test_error_mean` holds the largest
/// per-entry z-score.
pub fn run_moments(settings: &Settings) -> Result<ExperimentOutput> {
    let d = settings.d;
    let mut rng = rng::stream(rng::derive(settings.seed, LABEL_MOMENTS), 0);
    let single = TaskMixture::single(random_spd(d, 0.5, 2.0, &mut rng));
    let tasks: Vec<CovarianceSpec> = (0..3).map(|_| random_spd(d, 0.2, 2.0, &mut rng)).collect();
    let mixture = TaskMixture::new(tasks, vec![0.5, 0.3, 0.2])?;
    let a = linalg::standard_normal_matrix(d, d, &mut rng);
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (ni, &n) in settings.n_list.iter().enumerate() {
        for (name, mix) in [("single", &single), ("mixture", &mixture)] {
            let timer = Timer::start(settings);
            let closed = fourth_moment_closed_mixture(mix, &a, n)?;
            let mc_seed = rng::derive(settings.seed, 100 + ni as u64 * 2 + (name == "mixture") as u64);
            let est = fourth_moment_mc(mix, &a, n, settings.trials, mc_seed)?;
            let row = MomentRow {
                instance: name.into(),
                n,
                trials: settings.trials,
                max_z: est.max_z_score(&closed),
                max_abs_diff: linalg::max_abs(&(&est.mean - &closed)),
            };
            records.push(RunRecord {
                experiment: settings.experiment.as_str().into(),
                run_id: name.into(),
                seed: settings.seed,
                d,
                n: Some(n),
                m: None,
                k: None,
                hardness: None,
                test_error_mean: row.max_z,
                test_error_se: None,
                bound_value: None,
                wall_ms: timer.elapsed_ms(),
            });
            rows.push(row);
        }
    }
    let passed = rows.iter().all(|r| r.max_z <= 5.0);
    let summary = rows
        .iter()
        .map(|r| format!("{} n={}: max z-score {:.2}, max |diff| {:.3e}", r.instance, r.n, r.max_z, r.max_abs_diff))
        .collect();
    Ok(ExperimentOutput { records, tables: vec![Table::from_rows("moments", &rows)?], summary, passed: Some(passed) })
}
