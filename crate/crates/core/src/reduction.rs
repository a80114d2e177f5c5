//! Principal component analysis used to decorrelate and shrink token vectors
//! before clustering.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{top_eigenpairs, top_eigenpairs_krylov};
use crate::tensor::{ensure_finite, TokenMatrix};

/// Inputs up to this many columns use a dense eigensolver on the covariance.
const DENSE_LIMIT: usize = 64;
const KRYLOV_OVERSAMPLE: usize = 6;
const KRYLOV_TOL: f64 = 1e-10;

/// A fitted projection onto the leading principal axes.
///
/// Components are orthonormal rows ordered by decreasing explained variance.
/// Each component is signed so that its largest-magnitude entry is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: Vec<f64>,
    components: Vec<Vec<f64>>,
    explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    /// Sample variance (n - 1 denominator) along each component.
    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }

    /// Map reduced coordinates back into the input space.
    pub fn inverse_transform(&self, reduced: &TokenMatrix) -> Result<TokenMatrix> {
        if reduced.cols() != self.output_dim() {
            return Err(Error::validation(format!(
                "reduced matrix has {} columns, model has {} components",
                reduced.cols(),
                self.output_dim()
            )));
        }
        let cols = self.input_dim();
        let mut data = Vec::with_capacity(reduced.rows() * cols);
        for row in reduced.iter_rows() {
            let mut x = self.mean.clone();
            for (&w, comp) in row.iter().zip(&self.components) {
                for (xi, ci) in x.iter_mut().zip(comp) {
                    *xi += f64::from(w) * ci;
                }
            }
            data.extend(x.iter().map(|&v| v as f32));
        }
        TokenMatrix::new(reduced.rows(), cols, data)
    }
}

/// Fit the top `c_r` principal axes of `tokens`.
///
/// The fit is invariant to row order: rows are visited in a canonical
/// (lexicographic) order so permuted inputs give bit-identical models.
pub fn pca_fit(tokens: &TokenMatrix, c_r: usize) -> Result<PcaModel> {
    let (rows, cols) = (tokens.rows(), tokens.cols());
    if rows < 2 {
        return Err(Error::validation(format!(
            "PCA needs at least 2 rows, got {rows}"
        )));
    }
    let max_rank = (rows - 1).min(cols);
    if c_r == 0 || c_r > max_rank {
        return Err(Error::validation(format!(
            "reduced dimension {c_r} outside 1..={max_rank}"
        )));
    }
    ensure_finite(tokens.data())?;

    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|&a, &b| {
        tokens
            .row(a)
            .iter()
            .zip(tokens.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut mean = vec![0.0f64; cols];
    for &r in &order {
        for (m, &x) in mean.iter_mut().zip(tokens.row(r)) {
            *m += f64::from(x);
        }
    }
    for m in mean.iter_mut() {
        *m /= rows as f64;
    }

    // one centred token per column, in canonical row order
    let mut centered_t = DMatrix::<f64>::zeros(cols, rows);
    for (mut dst, &r) in centered_t.column_iter_mut().zip(&order) {
        for ((d, &x), m) in dst.iter_mut().zip(tokens.row(r)).zip(&mean) {
            *d = f64::from(x) - m;
        }
    }
    let centered = centered_t.transpose();
    let denom = (rows - 1) as f64;
    let (values, mut components) = if cols <= DENSE_LIMIT {
        let scatter = &centered_t * &centered;
        let mut cov = vec![0.0f64; cols * cols];
        for i in 0..cols {
            for j in 0..=i {
                let v = scatter[(i, j)] / denom;
                cov[i * cols + j] = v;
                cov[j * cols + i] = v;
            }
        }
        top_eigenpairs(cov, cols, c_r)
    } else {
        // covariance applied as X^T (X V) / (n - 1), never formed
        top_eigenpairs_krylov(cols, c_r, c_r + KRYLOV_OVERSAMPLE, KRYLOV_TOL, |v| {
            &centered_t * (&centered * v) / denom
        })
    };
    for comp in components.iter_mut() {
        let pivot = comp
            .iter()
            .enumerate()
            .fold(0usize, |best, (i, v)| if v.abs() > comp[best].abs() { i } else { best });
        if comp[pivot] < 0.0 {
            comp.iter_mut().for_each(|v| *v = -*v);
        }
    }
    let explained_variance = values.into_iter().map(|v| v.max(0.0)).collect();
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
    })
}

/// Project tokens onto the model's components: `row_i -> components . (row_i - mean)`.
pub fn pca_transform(model: &PcaModel, tokens: &TokenMatrix) -> Result<TokenMatrix> {
    if tokens.cols() != model.input_dim() {
        return Err(Error::validation(format!(
            "tokens have {} columns, model expects {}",
            tokens.cols(),
            model.input_dim()
        )));
    }
    let k = model.output_dim();
    let mut data = Vec::with_capacity(tokens.rows() * k);
    let mut centered = vec![0.0f64; model.input_dim()];
    for row in tokens.iter_rows() {
        for ((c, &x), m) in centered.iter_mut().zip(row).zip(&model.mean) {
            *c = f64::from(x) - m;
        }
        for comp in &model.components {
            let s: f64 = comp.iter().zip(&centered).map(|(a, b)| a * b).sum();
            data.push(s as f32);
        }
    }
    TokenMatrix::new(tokens.rows(), k, data)
}
