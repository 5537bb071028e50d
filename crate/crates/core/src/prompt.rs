//! ICL prompts and their embedding matrices.
//!
//! Row layout of a `(2d+2) × cols` embedding (0-indexed):
//! rows `0..d` hold features, row `d` the label, rows `d+1..=2d` the weight
//! estimate carried by a thought column and row `2d+1` the constant 1 of a
//! thought column. Demonstration columns come first.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{check_dims, Error, Result};
use crate::linalg;
use crate::rng;
use crate::task::CovarianceSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBatch {
    /// `d × n`, columns are the demonstrations `x_i`.
    pub x: DMatrix<f64>,
    /// `y_i = ⟨w, x_i⟩`.
    pub y: DVector<f64>,
    pub w: DVector<f64>,
    pub task_label: String,
}

impl PromptBatch {
    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }

    /// Builds a prompt from given features and weight, labels computed as `Xᵀw`.
    pub fn from_parts(x: DMatrix<f64>, w: DVector<f64>, task_label: impl Into<String>) -> Result<Self> {
        check_dims("prompt weight", x.nrows(), w.len(), x.nrows() == w.len())?;
        if x.ncols() == 0 {
            return Err(Error::Domain("a prompt needs at least one demonstration".into()));
        }
        let y = x.transpose() * &w;
        Ok(Self { x, y, w, task_label: task_label.into() })
    }

    /// Empirical covariance `XXᵀ/n`.
    pub fn sample_covariance(&self) -> DMatrix<f64> {
        (&self.x * self.x.transpose()) / self.len() as f64
    }
}

pub fn sample_prompt(cov: &CovarianceSpec, n: usize, seed: u64) -> Result<PromptBatch> {
    sample_prompt_with(cov, n, &mut rng::stream(seed, 0))
}

/// Draws `w ~ N(0, I_d)` first, then `x_i = U diag(√λ) z_i`.
pub fn sample_prompt_with<R: Rng + ?Sized>(cov: &CovarianceSpec, n: usize, rng: &mut R) -> Result<PromptBatch> {
    if n == 0 {
        return Err(Error::Domain("prompt length must be at least 1".into()));
    }
    let w = linalg::standard_normal_vector(cov.dim(), rng);
    let z = linalg::standard_normal_matrix(cov.basis().ncols(), n, rng);
    let x = cov.sqrt_factor() * z;
    PromptBatch::from_parts(x, w, cov.label.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub matrix: DMatrix<f64>,
    d: usize,
    demos: usize,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.d
    }

    /// Number of demonstration columns (`n` for training, `m` at test time).
    pub fn demos(&self) -> usize {
        self.demos
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn from_matrix(matrix: DMatrix<f64>, d: usize, demos: usize) -> Result<Self> {
        check_dims("embedding rows", 2 * d + 2, matrix.nrows(), matrix.nrows() == 2 * d + 2)?;
        check_dims("embedding demonstrations", format!("<= {}", matrix.ncols()), demos, demos <= matrix.ncols())?;
        Ok(Self { matrix, d, demos })
    }

    pub fn features(&self) -> DMatrix<f64> {
        self.matrix.view((0, 0), (self.d, self.demos)).into_owned()
    }

    pub fn labels(&self) -> DVector<f64> {
        self.matrix.row(self.d).columns(0, self.demos).transpose()
    }

    /// Appends the thought column `(0_d, 0, w, 1)`.
    pub fn push_thought(&mut self, w: &DVector<f64>) -> Result<()> {
        check_dims("thought", self.d, w.len(), w.len() == self.d)?;
        let col = thought_column(self.d, w);
        let c = self.matrix.ncols();
        let m = std::mem::replace(&mut self.matrix, DMatrix::zeros(0, 0));
        self.matrix = m.insert_column(c, 0.0);
        self.matrix.set_column(c, &col);
        Ok(())
    }
}

fn thought_column(d: usize, w: &DVector<f64>) -> DVector<f64> {
    let mut col = DVector::zeros(2 * d + 2);
    col.rows_mut(d + 1, d).copy_from(w);
    col[2 * d + 1] = 1.0;
    col
}

/// Training layout: demonstrations followed by one column `(0_d, 0, w0, 1)`.
pub fn build_train_embedding(prompt: &PromptBatch, w0: &DVector<f64>) -> Result<Embedding> {
    build_cot_embedding(prompt, std::slice::from_ref(w0))
}

/// Test-time layout: demonstrations followed by one column per thought.
pub fn build_cot_embedding(prompt: &PromptBatch, thoughts: &[DVector<f64>]) -> Result<Embedding> {
    if thoughts.is_empty() {
        return Err(Error::Domain("at least one thought (w0) is required".into()));
    }
    let d = prompt.dim();
    let n = prompt.len();
    let mut matrix = DMatrix::zeros(2 * d + 2, n + thoughts.len());
    matrix.view_mut((0, 0), (d, n)).copy_from(&prompt.x);
    matrix.view_mut((d, 0), (1, n)).copy_from(&prompt.y.transpose());
    for (j, w) in thoughts.iter().enumerate() {
        check_dims("thought", d, w.len(), w.len() == d)?;
        matrix.set_column(n + j, &thought_column(d, w));
    }
    Ok(Embedding { matrix, d, demos: n })
}
