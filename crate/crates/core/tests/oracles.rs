//! Frozen values worked out by hand for small diagonal instances.

use lsa_cot::bounds::{bound_corollary, bound_cot_leading, bound_direct, mismatch_trace};
use lsa_cot::cot::{closed_form_k_step, cot_rollout, expected_sq_error};
use lsa_cot::lsa::optimal_params;
use lsa_cot::prompt::PromptBatch;
use lsa_cot::select::{simplex_project, spearman};
use lsa_cot::task::{
    fourth_moment_closed, gamma_multi, gamma_single, hardness, power_law_eigenvalues, CovarianceSpec, GammaMatrix,
    GammaProvenance,
};
use nalgebra::{DMatrix, DVector};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

fn diag(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(values))
}

#[test]
fn single_task_gamma_for_diag_one_two() {
    // (1 + 1/4) diag(1, 2) + (3/4) I
    let cov = CovarianceSpec::diagonal(&[1.0, 2.0]).unwrap();
    let g = gamma_single(&cov, 4).unwrap();
    assert!((g.matrix - diag(&[2.0, 3.25])).abs().max() < 1e-14);
}

#[test]
fn multi_task_gamma_for_complementary_axes() {
    // M = I/2, Σπ(2Λ² + tr(Λ)Λ) = 3I/2, Γ = (1/2)(I/2) + (1/2)(3I/2)(2I) = 1.75 I
    let a = CovarianceSpec::diagonal(&[1.0, 0.0]).unwrap();
    let b = CovarianceSpec::diagonal(&[0.0, 1.0]).unwrap();
    let g = gamma_multi(&[a, b], &[0.5, 0.5], 2).unwrap();
    assert!((g.matrix - diag(&[1.75, 1.75])).abs().max() < 1e-14);
}

#[test]
fn optimal_v31_scales_with_inverse_c() {
    let cov = CovarianceSpec::diagonal(&[1.0, 2.0]).unwrap();
    let params = optimal_params(&gamma_single(&cov, 4).unwrap(), 2.0).unwrap();
    let expect = diag(&[-0.25, -1.0 / 6.5]);
    assert!((params.v31() - expect).abs().max() < 1e-15);
    assert_eq!(params.w24(), -2.0);
}

#[test]
fn hardness_and_power_law() {
    assert_eq!(hardness(&CovarianceSpec::diagonal(&[1.0, 2.0]).unwrap()).unwrap(), 3.0);
    assert_eq!(hardness(&CovarianceSpec::diagonal(&[0.0, 0.5, 0.25]).unwrap()).unwrap(), 3.0);
    let eigs = power_law_eigenvalues(1.0, 2);
    assert!(close(eigs[0], 2.0 / 3.0, 1e-15) && close(eigs[1], 1.0 / 3.0, 1e-15));
}

#[test]
fn direct_and_corollary_bounds_isotropic() {
    let cov = CovarianceSpec::identity(4);
    // H = 4: (4/100)·25 + (4/20)·5
    assert!(close(bound_direct(&cov, 10, 20).unwrap().value, 2.0, 1e-14));
    // 4 (1 + 10/5)^{-2}
    assert!(close(bound_corollary(&cov, 10, 1).unwrap().value, 4.0 / 9.0, 1e-14));
}

#[test]
fn leading_term_isotropic_is_eleven_over_thirty_one() {
    let cov = CovarianceSpec::identity(10);
    for k in 1..=4 {
        let expect = 10.0 * (11.0f64 / 31.0).powi(2 * k as i32);
        assert!(close(bound_cot_leading(&cov, 20, k).unwrap().value, expect, 1e-12));
    }
}

#[test]
fn mismatch_trace_diagonal() {
    // I − Γ⁻¹Σ = diag(1/2, −1/2); fourth power traces to 2/16
    let g = GammaMatrix::from_matrix(diag(&[2.0, 2.0]), GammaProvenance::SingleTask { n: 1 }).unwrap();
    assert!(close(mismatch_trace(&g, &diag(&[1.0, 3.0]), 2).unwrap(), 0.125, 1e-15));
}

#[test]
fn expected_squared_error_diagonal() {
    let g = GammaMatrix::from_matrix(diag(&[2.0, 2.0]), GammaProvenance::SingleTask { n: 1 }).unwrap();
    let s = diag(&[1.0, 3.0]);
    assert!(close(expected_sq_error(&g, &s, 0).unwrap(), 2.0, 1e-15));
    assert!(close(expected_sq_error(&g, &s, 1).unwrap(), 0.5, 1e-15));
    assert!(close(expected_sq_error(&g, &s, 2).unwrap(), 0.125, 1e-15));
}

#[test]
fn scalar_rollout_hits_w_when_gamma_matches_sample_variance() {
    // x = (1, 2): Σ̂ = 5/2 = γ, so a single step recovers w = 3 exactly
    let p =
        PromptBatch::from_parts(DMatrix::from_row_slice(1, 2, &[1.0, 2.0]), DVector::from_element(1, 3.0), "").unwrap();
    let g = GammaMatrix::from_matrix(DMatrix::from_element(1, 1, 2.5), GammaProvenance::SingleTask { n: 1 }).unwrap();
    let r = cot_rollout(&p, &g, 3).unwrap();
    assert_eq!(r.trajectory[0][0], 0.0);
    for k in 1..=3 {
        assert!(close(r.trajectory[k][0], 3.0, 1e-15));
    }
    assert!(r.sq_errors[3] < 1e-28);
}

#[test]
fn scalar_closed_form_geometric() {
    // w_k = (1 − (1 − σ/γ)^k) w with σ/γ = 1/4
    let g = GammaMatrix::from_matrix(DMatrix::from_element(1, 1, 4.0), GammaProvenance::SingleTask { n: 1 }).unwrap();
    let s = DMatrix::from_element(1, 1, 1.0);
    let w = DVector::from_element(1, 2.0);
    for k in 0..6 {
        let got = closed_form_k_step(&g, &s, k, &w).unwrap()[0];
        assert!(close(got, 2.0 * (1.0 - 0.75f64.powi(k as i32)), 1e-15));
    }
}

#[test]
fn scalar_fourth_moment() {
    // E[s²] = λ²(1 + 2/n) for s = mean of n draws of x², x ~ N(0, λ)
    let cov = CovarianceSpec::diagonal(&[2.0]).unwrap();
    let m = fourth_moment_closed(&cov, &DMatrix::from_element(1, 1, 1.0), 4).unwrap();
    assert!(close(m[(0, 0)], 6.0, 1e-15));
}

#[test]
fn simplex_projection_known_points() {
    assert_eq!(simplex_project(&[0.5, 0.5]).unwrap(), vec![0.5, 0.5]);
    assert_eq!(simplex_project(&[2.0, 0.0]).unwrap(), vec![1.0, 0.0]);
    let p = simplex_project(&[1.0, 0.5, -1.0]).unwrap();
    assert!(close(p[0], 0.75, 1e-15) && close(p[1], 0.25, 1e-15) && p[2] == 0.0);
    let p = simplex_project(&[0.3, 0.3, 0.3]).unwrap();
    assert!(p.iter().all(|v| close(*v, 1.0 / 3.0, 1e-15)));
}

#[test]
fn spearman_with_ties() {
    assert!(close(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0, 1e-15));
    // average ranks (1, 2.5, 2.5, 4) against (1, 2, 3, 4)
    let rho = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!(close(rho, 3.0 / 10f64.sqrt(), 1e-14));
}
