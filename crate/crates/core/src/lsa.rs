//! Single-layer linear self-attention `f(E) = E + V E (Eᵀ W E) / ρ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::linalg;
use crate::prompt::Embedding;
use crate::task::GammaMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct LsaParams {
    pub d: usize,
    pub c: f64,
    /// `(2d+2) × (2d+2)` value-projection product.
    pub v: DMatrix<f64>,
    /// `(2d+2) × (2d+2)` key-query product.
    pub w: DMatrix<f64>,
    /// True when only the `V₃₁` block of `V` and the `cI` / `−c` entries of `W` are populated.
    pub structured: bool,
}

/// `W` with `cI` in rows `0..d`, columns `d+1..=2d` and `−c` at `(d, 2d+1)`.
pub fn structured_w(d: usize, c: f64) -> DMatrix<f64> {
    let size = 2 * d + 2;
    let mut w = DMatrix::zeros(size, size);
    for i in 0..d {
        w[(i, d + 1 + i)] = c;
    }
    w[(d, 2 * d + 1)] = -c;
    w
}

impl LsaParams {
    /// `V` zero except `V[d+1..=2d, 0..d] = v31`; `W` per [`structured_w`].
    pub fn structured(v31: &DMatrix<f64>, c: f64) -> Result<Self> {
        if !(c != 0.0) || !c.is_finite() {
            return Err(Error::Domain(format!("c = {c} must be a nonzero finite scalar")));
        }
        check_dims("V31", "square", format!("{}x{}", v31.nrows(), v31.ncols()), v31.is_square())?;
        let d = v31.nrows();
        let size = 2 * d + 2;
        let mut v = DMatrix::zeros(size, size);
        v.view_mut((d + 1, 0), (d, d)).copy_from(v31);
        Ok(Self { d, c, v, w: structured_w(d, c), structured: true })
    }

    pub fn dense(d: usize, c: f64, v: DMatrix<f64>, w: DMatrix<f64>) -> Result<Self> {
        let size = 2 * d + 2;
        for (name, m) in [("V", &v), ("W", &w)] {
            check_dims(
                "LSA parameter",
                format!("{size}x{size}"),
                format!("{name}: {}x{}", m.nrows(), m.ncols()),
                m.nrows() == size && m.ncols() == size,
            )?;
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("{name} has non-finite entries")));
            }
        }
        Ok(Self { d, c, v, w, structured: false })
    }

    pub fn v31(&self) -> DMatrix<f64> {
        self.v.view((self.d + 1, 0), (self.d, self.d)).into_owned()
    }

    /// `W[d, 2d+1]`, the `W₂₄` entry.
    pub fn w24(&self) -> f64 {
        self.w[(self.d, 2 * self.d + 1)]
    }

    /// `V₃₁ · W₂₄`, the operator applied to `X(y − Xᵀŵ)` by a structured layer.
    pub fn effective_operator(&self) -> DMatrix<f64> {
        self.v31() * self.w24()
    }

    pub fn to_json(&self) -> LsaParamsJson {
        LsaParamsJson {
            d: self.d,
            c: self.c,
            v31: linalg::to_rows(&self.v31()),
            structured: self.structured,
            v: (!self.structured).then(|| linalg::to_rows(&self.v)),
            w: (!self.structured).then(|| linalg::to_rows(&self.w)),
        }
    }

    pub fn from_json(json: &LsaParamsJson) -> Result<Self> {
        if json.structured {
            let p = Self::structured(&linalg::from_rows(&json.v31)?, json.c)?;
            check_dims("params json", json.d, p.d, p.d == json.d)?;
            Ok(p)
        } else {
            let (Some(v), Some(w)) = (&json.v, &json.w) else {
                return Err(Error::Domain("unstructured params need full V and W".into()));
            };
            Self::dense(json.d, json.c, linalg::from_rows(v)?, linalg::from_rows(w)?)
        }
    }
}

/// `{d, c, V31, structured}` with matrices row-major; full `V`, `W` only when unstructured.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LsaParamsJson {
    pub d: usize,
    pub c: f64,
    #[serde(rename = "V31")]
    pub v31: Vec<Vec<f64>>,
    pub structured: bool,
    #[serde(default, rename = "V", skip_serializing_if = "Option::is_none")]
    pub v: Option<Vec<Vec<f64>>>,
    #[serde(default, rename = "W", skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<Vec<f64>>>,
}

/// Full forward pass. Evaluated as `E + (V (E Eᵀ) W) E / ρ`, which keeps the
/// cost linear in the number of columns.
pub fn lsa_forward(e: &Embedding, params: &LsaParams, rho: f64) -> Result<Embedding> {
    if !(rho > 0.0) {
        return Err(Error::Domain(format!("rho = {rho} must be positive")));
    }
    check_dims("lsa_forward", params.d, e.dim(), params.d == e.dim())?;
    let gram = &e.matrix * e.matrix.transpose();
    let mixer = &params.v * gram * &params.w;
    let out = &e.matrix + (mixer * &e.matrix) / rho;
    Embedding::from_matrix(out, e.dim(), e.demos())
}

/// Rows `d+1..=2d` of the last column.
pub fn extract_weight(e: &Embedding) -> Result<DVector<f64>> {
    if e.cols() == 0 {
        return Err(Error::Domain("embedding has no columns".into()));
    }
    let d = e.dim();
    Ok(e.matrix.view((d + 1, e.cols() - 1), (d, 1)).column(0).into_owned())
}

/// Global optimum: `V₃₁ = −Γ⁻¹/c`, `W` structured with scale `c`.
pub fn optimal_params(gamma: &GammaMatrix, c: f64) -> Result<LsaParams> {
    let inv = gamma.inverse()?;
    LsaParams::structured(&(inv * (-1.0 / c)), c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{build_cot_embedding, build_train_embedding, sample_prompt};
    use crate::task::{gamma_single, make_covariance, BasisChoice, CovarianceSpec};

    fn instance() -> (CovarianceSpec, Embedding) {
        let cov = make_covariance(&[1.5, 0.7, 0.2], BasisChoice::Seed(2)).unwrap();
        let p = sample_prompt(&cov, 9, 4).unwrap();
        let e = build_train_embedding(&p, &DVector::from_element(3, 0.3)).unwrap();
        (cov, e)
    }

    #[test]
    fn zero_value_matrix_is_identity() {
        let (_, e) = instance();
        let params = LsaParams::structured(&DMatrix::zeros(3, 3), 1.0).unwrap();
        let out = lsa_forward(&e, &params, 9.0).unwrap();
        assert_eq!(out, e);
        assert_eq!(extract_weight(&out).unwrap(), DVector::from_element(3, 0.3));
    }

    #[test]
    fn update_is_linear_in_v() {
        let (cov, e) = instance();
        let g = gamma_single(&cov, 9).unwrap();
        let p = optimal_params(&g, 1.0).unwrap();
        let mut scaled = p.clone();
        scaled.v *= 3.0;
        let base = lsa_forward(&e, &p, 9.0).unwrap().matrix - &e.matrix;
        let tripled = lsa_forward(&e, &scaled, 9.0).unwrap().matrix - &e.matrix;
        assert!(linalg::max_abs(&(tripled - base * 3.0)) < 1e-12);
    }

    #[test]
    fn optimal_estimate_matches_preconditioned_moment() {
        let cov = make_covariance(&[1.5, 0.7, 0.2], BasisChoice::Seed(2)).unwrap();
        let n = 12;
        let p = sample_prompt(&cov, n, 8).unwrap();
        let g = gamma_single(&cov, n).unwrap();
        for c in [1.0, -0.5, 2.0] {
            let params = optimal_params(&g, c).unwrap();
            let e = build_train_embedding(&p, &DVector::zeros(3)).unwrap();
            let w = extract_weight(&lsa_forward(&e, &params, n as f64).unwrap()).unwrap();
            let expect = g.inverse().unwrap() * &p.x * p.x.transpose() * &p.w / n as f64;
            assert!((w - expect).amax() < 1e-10);
        }
    }

    #[test]
    fn optimal_params_scalar_example() {
        let g = gamma_single(&CovarianceSpec::identity(2), 2).unwrap();
        let p = optimal_params(&g, 1.0).unwrap();
        assert!(linalg::max_abs(&(p.v31() + DMatrix::identity(2, 2) * 0.4)) < 1e-15);
        let p = optimal_params(&g, -3.0).unwrap();
        assert!(linalg::max_abs(&(p.effective_operator() - g.inverse().unwrap())) <= 1e-12);
    }

    #[test]
    fn singular_gamma_rejected() {
        let g =
            GammaMatrix::from_matrix(DMatrix::zeros(2, 2), crate::task::GammaProvenance::SingleTask { n: 1 }).unwrap();
        assert!(optimal_params(&g, 1.0).is_err());
    }

    #[test]
    fn extract_reads_last_column() {
        let mut m = DMatrix::zeros(6, 2);
        m[(3, 1)] = 4.0;
        m[(4, 1)] = -1.0;
        m[(5, 1)] = 1.0;
        let e = Embedding::from_matrix(m, 2, 1).unwrap();
        assert_eq!(extract_weight(&e).unwrap(), DVector::from_vec(vec![4.0, -1.0]));
    }

    #[test]
    fn extract_before_forward_is_last_thought() {
        let p = sample_prompt(&CovarianceSpec::identity(2), 5, 1).unwrap();
        let thoughts = vec![DVector::zeros(2), DVector::from_vec(vec![0.2, 0.9])];
        let e = build_cot_embedding(&p, &thoughts).unwrap();
        assert_eq!(extract_weight(&e).unwrap(), thoughts[1]);
    }

    #[test]
    fn structured_forward_preserves_demonstrations() {
        let (cov, e) = instance();
        let params = optimal_params(&gamma_single(&cov, 9).unwrap(), 1.3).unwrap();
        let out = lsa_forward(&e, &params, 9.0).unwrap();
        let d = 3;
        assert_eq!(out.matrix.view((0, 0), (d + 1, 9)), e.matrix.view((0, 0), (d + 1, 9)));
    }

    #[test]
    fn json_round_trip() {
        let g = gamma_single(&CovarianceSpec::identity(2), 3).unwrap();
        let p = optimal_params(&g, 1.0).unwrap();
        let text = serde_json::to_string(&p.to_json()).unwrap();
        assert!(text.contains("\"V31\""));
        let back = LsaParams::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
