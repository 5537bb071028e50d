//! Test-time chain-of-thought: the rollout recursion, its closed form and
//! Monte Carlo estimates of the resulting estimation error.
//!
//! `k` is always the number of contraction applications after `w₀ = 0`, so
//! the estimate after `k` steps is `(I − (I − Γ⁻¹Σ̂)^k) w` and `k = 0` gives
//! the zero vector.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution};
use rayon::prelude::*;

use crate::error::{check_dims, Error, Result};
use crate::linalg::{self, frobenius_sq, mat_pow};
use crate::lsa::{extract_weight, lsa_forward, LsaParams};
use crate::prompt::{build_cot_embedding, PromptBatch};
use crate::rng;
use crate::task::{CovarianceSpec, GammaMatrix};

pub const MIN_TRIALS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct CotResult {
    /// `w₀ = 0, w₁, …, w_k`.
    pub trajectory: Vec<DVector<f64>>,
    pub final_estimate: DVector<f64>,
    /// `‖w_i − w_test‖²` for every trajectory entry.
    pub sq_errors: Vec<f64>,
    pub k: usize,
    pub m: usize,
    pub sigma_hat: DMatrix<f64>,
}

fn step_with_inverse(w: &DVector<f64>, prompt: &PromptBatch, gamma_inv: &DMatrix<f64>) -> DVector<f64> {
    let residual = prompt.x.transpose() * w - &prompt.y;
    w - gamma_inv * (&prompt.x * residual) / prompt.len() as f64
}

/// `w − (1/m) Γ⁻¹ X (Xᵀw − y)`.
pub fn cot_step(w: &DVector<f64>, prompt: &PromptBatch, gamma: &GammaMatrix) -> Result<DVector<f64>> {
    check_dims("cot_step weight", prompt.dim(), w.len(), w.len() == prompt.dim())?;
    check_dims("cot_step gamma", prompt.dim(), gamma.dim, gamma.dim == prompt.dim())?;
    Ok(step_with_inverse(w, prompt, &gamma.inverse()?))
}

pub fn cot_rollout(prompt: &PromptBatch, gamma: &GammaMatrix, k: usize) -> Result<CotResult> {
    check_dims("cot_rollout gamma", prompt.dim(), gamma.dim, gamma.dim == prompt.dim())?;
    let inv = gamma.inverse()?;
    let mut trajectory = Vec::with_capacity(k + 1);
    trajectory.push(DVector::zeros(prompt.dim()));
    for i in 0..k {
        let next = step_with_inverse(&trajectory[i], prompt, &inv);
        trajectory.push(next);
    }
    Ok(finish(prompt, trajectory))
}

/// The same rollout driven by the network: every step runs `lsa_forward` on
/// the prompt with all thoughts so far appended and reads the new thought
/// from the last column.
pub fn cot_rollout_lsa(prompt: &PromptBatch, params: &LsaParams, k: usize) -> Result<CotResult> {
    check_dims("cot_rollout_lsa", prompt.dim(), params.d, params.d == prompt.dim())?;
    let rho = prompt.len() as f64;
    let mut trajectory = vec![DVector::zeros(prompt.dim())];
    for _ in 0..k {
        let e = build_cot_embedding(prompt, &trajectory)?;
        let out = lsa_forward(&e, params, rho)?;
        trajectory.push(extract_weight(&out)?);
    }
    Ok(finish(prompt, trajectory))
}

fn finish(prompt: &PromptBatch, trajectory: Vec<DVector<f64>>) -> CotResult {
    let sq_errors = trajectory.iter().map(|w| (w - &prompt.w).norm_squared()).collect();
    CotResult {
        final_estimate: trajectory.last().expect("w0 is always present").clone(),
        k: trajectory.len() - 1,
        m: prompt.len(),
        sigma_hat: prompt.sample_covariance(),
        trajectory,
        sq_errors,
    }
}

/// `(I − (I − Γ⁻¹Σ̂)^k) w_test`, with the power taken by repeated squaring.
pub fn closed_form_k_step(
    gamma: &GammaMatrix,
    sigma_hat: &DMatrix<f64>,
    k: usize,
    w_test: &DVector<f64>,
) -> Result<DVector<f64>> {
    let d = gamma.dim;
    check_dims("closed form Σ̂", d, sigma_hat.nrows(), sigma_hat.shape() == (d, d))?;
    check_dims("closed form w", d, w_test.len(), w_test.len() == d)?;
    let contraction = error_operator(gamma, sigma_hat)?;
    Ok(w_test - mat_pow(&contraction, k as u64) * w_test)
}

/// `N = I − Γ⁻¹Σ̂`; the estimate error after `k` steps is `−N^k w`.
pub fn error_operator(gamma: &GammaMatrix, sigma_hat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = gamma.dim;
    Ok(DMatrix::identity(d, d) - gamma.inverse()? * sigma_hat)
}

/// `tr((I − Σ̂Γ⁻¹)^k (I − Γ⁻¹Σ̂)^k) = ‖N^k‖_F²`, the error averaged over `w ~ N(0, I)`.
pub fn expected_sq_error(gamma: &GammaMatrix, sigma_hat: &DMatrix<f64>, k: usize) -> Result<f64> {
    Ok(frobenius_sq(&mat_pow(&error_operator(gamma, sigma_hat)?, k as u64)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub trials: usize,
}

impl ErrorEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let t = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / t;
        let var =
            if samples.len() > 1 { samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (t - 1.0) } else { 0.0 };
        Self { mean, std_err: (var / t).sqrt(), trials: samples.len() }
    }
}

/// Draws `Σ̂ = XXᵀ/m` for `m` columns `x ~ N(0, Λ)`. When `m` is at least the
/// rank of `Λ` the Wishart factor is drawn through the Bartlett decomposition,
/// which costs `O(r²)` instead of `O(r m)` and has the same distribution.
pub fn sample_sigma_hat<R: Rng + ?Sized>(cov: &CovarianceSpec, m: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if m == 0 {
        return Err(Error::Domain("test prompt length m must be at least 1".into()));
    }
    let factor = cov.sqrt_factor();
    let r = factor.ncols();
    let root = if m >= r {
        let mut a = DMatrix::zeros(r, r);
        for i in 0..r {
            let chi = ChiSquared::new((m - i) as f64).map_err(|e| Error::Domain(e.to_string()))?;
            a[(i, i)] = chi.sample(rng).sqrt();
            for j in 0..i {
                a[(i, j)] = linalg::standard_normal_vector(1, rng)[0];
            }
        }
        &factor * a
    } else {
        &factor * linalg::standard_normal_matrix(r, m, rng)
    };
    Ok(&root * root.transpose() / m as f64)
}

/// Per-trial `‖N^k‖_F²` for `k = 0..=k_max`; row `t` uses RNG stream `t`.
/// Trials run in parallel and are returned in trial order.
pub fn mc_error_trials(
    train_gamma: &GammaMatrix,
    test_cov: &CovarianceSpec,
    m: usize,
    k_max: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if trials < MIN_TRIALS {
        return Err(Error::Domain(format!("at least {MIN_TRIALS} trials are required, got {trials}")));
    }
    check_dims("mc test error", train_gamma.dim, test_cov.dim(), train_gamma.dim == test_cov.dim())?;
    let inv = train_gamma.inverse()?;
    let d = train_gamma.dim;
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(seed, t as u64);
            let sigma_hat = sample_sigma_hat(test_cov, m, &mut rng)?;
            let n_op = DMatrix::identity(d, d) - &inv * sigma_hat;
            let mut power = DMatrix::identity(d, d);
            let mut row = Vec::with_capacity(k_max + 1);
            row.push(d as f64);
            for _ in 0..k_max {
                power = &n_op * power;
                row.push(frobenius_sq(&power));
            }
            Ok(row)
        })
        .collect()
}

/// Mean and standard error of the test error for every `k = 0..=k_max`.
pub fn mc_test_error_curve(
    train_gamma: &GammaMatrix,
    test_cov: &CovarianceSpec,
    m: usize,
    k_max: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<ErrorEstimate>> {
    let rows = mc_error_trials(train_gamma, test_cov, m, k_max, trials, seed)?;
    Ok((0..=k_max).map(|k| ErrorEstimate::from_samples(&rows.iter().map(|r| r[k]).collect::<Vec<_>>())).collect())
}

pub fn mc_test_error(
    train_gamma: &GammaMatrix,
    test_cov: &CovarianceSpec,
    m: usize,
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<ErrorEstimate> {
    Ok(mc_test_error_curve(train_gamma, test_cov, m, k, trials, seed)?[k])
}

/// Normalisation `s` of the one-step estimate `ŵ = (1/s) Γ⁻¹ X Xᵀ w` built
/// from a length-`m` prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DirectNormalizer {
    /// `s = m`, the first CoT step.
    #[default]
    PromptLength,
    /// `s = n`, the training prompt length.
    TrainLength,
}

/// Monte Carlo of `‖ŵ − w‖²` for the one-step estimate. With
/// `TrainLength` the estimate is `(m/n) Γ⁻¹Σ̂ w`, i.e. the first step under
/// the preconditioner `(n/m) Γ`.
pub fn mc_direct_error(
    gamma: &GammaMatrix,
    test_cov: &CovarianceSpec,
    m: usize,
    normalizer: DirectNormalizer,
    trials: usize,
    seed: u64,
) -> Result<ErrorEstimate> {
    if m == 0 {
        return Err(Error::Domain("test prompt length m must be positive".into()));
    }
    match normalizer {
        DirectNormalizer::PromptLength => mc_test_error(gamma, test_cov, m, 1, trials, seed),
        DirectNormalizer::TrainLength => {
            let scaled = GammaMatrix { matrix: &gamma.matrix * (gamma.n() as f64 / m as f64), ..gamma.clone() };
            mc_test_error(&scaled, test_cov, m, 1, trials, seed)
        }
    }
}

/// CSV rows `trial,k_step,sq_error`.
pub fn write_trials_csv<W: Write>(rows: &[Vec<f64>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["trial", "k_step", "sq_error"])?;
    for (t, row) in rows.iter().enumerate() {
        for (k, e) in row.iter().enumerate() {
            w.write_record([t.to_string(), k.to_string(), e.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lsa::optimal_params;
    use crate::prompt::sample_prompt;
    use crate::task::{gamma_single, make_covariance, BasisChoice, GammaProvenance};

    fn setup(m: usize, seed: u64) -> (CovarianceSpec, GammaMatrix, PromptBatch) {
        let cov = make_covariance(&[1.3, 0.8, 0.4], BasisChoice::Seed(seed)).unwrap();
        let gamma = gamma_single(&cov, 12).unwrap();
        let p = sample_prompt(&cov, m, seed + 1).unwrap();
        (cov, gamma, p)
    }

    #[test]
    fn true_weight_is_a_fixed_point() {
        let (_, gamma, p) = setup(7, 1);
        let out = cot_step(&p.w, &p, &gamma).unwrap();
        assert!((out - &p.w).norm() < 1e-12);
    }

    #[test]
    fn matched_sigma_hat_is_exact_in_one_step() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]);
        let p = PromptBatch::from_parts(x, DVector::from_vec(vec![0.7, -0.2]), "t").unwrap();
        let gamma = GammaMatrix::from_matrix(p.sample_covariance(), GammaProvenance::SingleTask { n: 2 }).unwrap();
        let r = cot_rollout(&p, &gamma, 1).unwrap();
        assert!((r.final_estimate - &p.w).norm() < 1e-14);
    }

    #[test]
    fn scalar_recursion() {
        let p = PromptBatch::from_parts(DMatrix::from_element(1, 1, 1.5), DVector::from_element(1, 2.0), "s").unwrap();
        let gamma =
            GammaMatrix::from_matrix(DMatrix::from_element(1, 1, 3.0), GammaProvenance::SingleTask { n: 1 }).unwrap();
        let w1 = cot_step(&DVector::zeros(1), &p, &gamma).unwrap();
        assert!((w1[0] - 2.25 / 3.0 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn rollout_matches_closed_form() {
        for seed in 0..5 {
            let (_, gamma, p) = setup(15, seed);
            for k in [0, 1, 2, 7, 33, 64] {
                let r = cot_rollout(&p, &gamma, k).unwrap();
                let cf = closed_form_k_step(&gamma, &p.sample_covariance(), k, &p.w).unwrap();
                assert!((&r.final_estimate - &cf).norm() <= 1e-9 * cf.norm().max(1e-300), "k={k}");
                assert_eq!(r.trajectory.len(), k + 1);
            }
        }
    }

    #[test]
    fn closed_form_conventions() {
        let (_, gamma, p) = setup(10, 3);
        assert_eq!(closed_form_k_step(&gamma, &p.sample_covariance(), 0, &p.w).unwrap(), DVector::zeros(3));
        let out = closed_form_k_step(&gamma, &gamma.matrix, 5, &p.w).unwrap();
        assert!((out - &p.w).norm() < 1e-12);
    }

    #[test]
    fn lsa_driven_rollout_matches_recursion() {
        let (_, gamma, p) = setup(20, 4);
        let params = optimal_params(&gamma, 0.7).unwrap();
        let a = cot_rollout(&p, &gamma, 6).unwrap();
        let b = cot_rollout_lsa(&p, &params, 6).unwrap();
        for (x, y) in a.trajectory.iter().zip(&b.trajectory) {
            assert!((x - y).norm() <= 1e-10);
        }
    }

    #[test]
    fn errors_shrink_under_contraction() {
        let (_, gamma, p) = setup(400, 5);
        let n_op = error_operator(&gamma, &p.sample_covariance()).unwrap();
        assert!(linalg::op_norm(&n_op) < 1.0);
        let r = cot_rollout(&p, &gamma, 10).unwrap();
        assert!(r.sq_errors.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn trace_identity_over_basis_directions() {
        let (_, gamma, p) = setup(6, 6);
        let sh = p.sample_covariance();
        let k = 4;
        let pk = mat_pow(&error_operator(&gamma, &sh).unwrap(), k);
        let summed: f64 =
            (0..3).map(|i| (&pk * DVector::from_fn(3, |j, _| (i == j) as u8 as f64)).norm_squared()).sum();
        let lhs = expected_sq_error(&gamma, &sh, k as usize).unwrap();
        let explicit = DMatrix::identity(3, 3) - &sh * gamma.inverse().unwrap();
        let rhs = (mat_pow(&explicit, k) * &pk).trace();
        assert!((lhs - summed).abs() < 1e-9 && (lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn bartlett_matches_direct_sampling_in_mean() {
        let cov = make_covariance(&[2.0, 0.5], BasisChoice::Seed(1)).unwrap();
        let mut rng = rng::stream(9, 0);
        let mut acc = DMatrix::zeros(2, 2);
        let reps = 4000;
        for _ in 0..reps {
            acc += sample_sigma_hat(&cov, 5, &mut rng).unwrap();
        }
        let mean = acc / reps as f64;
        // sd of a diagonal entry of the mean is λ·√(2/5)/√reps ≲ 0.02
        assert!(linalg::max_abs(&(mean - cov.matrix())) < 0.1);
    }

    #[test]
    fn matched_error_decays_and_mismatch_grows() {
        let cov = CovarianceSpec::identity(3);
        let matched = GammaMatrix::from_matrix(DMatrix::identity(3, 3), GammaProvenance::SingleTask { n: 1 }).unwrap();
        let curve = mc_test_error_curve(&matched, &cov, 100_000, 4, 10, 3).unwrap();
        assert!(curve.windows(2).all(|w| w[1].mean < w[0].mean * 1e-3));
        let small =
            GammaMatrix::from_matrix(DMatrix::identity(3, 3) * 0.4, GammaProvenance::SingleTask { n: 1 }).unwrap();
        let curve = mc_test_error_curve(&small, &cov, 100_000, 4, 10, 3).unwrap();
        assert!(curve.windows(2).all(|w| w[1].mean > w[0].mean));
    }

    #[test]
    fn seeded_reproducibility_and_guards() {
        let (cov, gamma, _) = setup(5, 7);
        let a = mc_test_error(&gamma, &cov, 30, 3, 12, 99).unwrap();
        assert_eq!(a, mc_test_error(&gamma, &cov, 30, 3, 12, 99).unwrap());
        assert!(mc_test_error(&gamma, &cov, 30, 3, 5, 99).is_err());
    }

    #[test]
    fn trials_csv_layout() {
        let mut buf = Vec::new();
        write_trials_csv(&[vec![3.0, 1.5], vec![3.0, 0.5]], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "trial,k_step,sq_error\n0,0,3\n0,1,1.5\n1,0,3\n1,1,0.5\n");
    }
    #[test]
    fn direct_normalizers_agree_when_lengths_match() {
        let (cov, gamma, _) = setup(12, 3);
        let a = mc_direct_error(&gamma, &cov, 12, DirectNormalizer::PromptLength, 50, 1).unwrap();
        let b = mc_direct_error(&gamma, &cov, 12, DirectNormalizer::TrainLength, 50, 1).unwrap();
        assert_eq!(a, b);
        let short = mc_direct_error(&gamma, &cov, 48, DirectNormalizer::TrainLength, 50, 1).unwrap();
        // with m = 4n the train-length estimate overshoots by a factor of about four
        assert!(short.mean > a.mean);
    }

}
