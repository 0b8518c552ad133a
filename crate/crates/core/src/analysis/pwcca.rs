//! Projection-weighted canonical correlation analysis.
//!
//! Both views are centered and truncated to the principal components
//! holding `variance_kept` of their variance, canonical correlations come
//! from an SVD of the ridge-whitened cross-covariance, and the score is
//! the correlation average weighted by how much of the left view's data
//! each canonical direction accounts for. The left view is by convention
//! the model layer under analysis; the weighting is what makes the score
//! sensitive to how much of *that* view the correlations explain.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::ArrayView2;

use crate::error::{Error, Result};

use super::RepresentationMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PwccaOptions {
    /// Fraction of each view's variance kept by truncation, in (0, 1].
    pub variance_kept: f64,
    /// Ridge added to each view's covariance diagonal before whitening.
    pub ridge: f64,
}

impl Default for PwccaOptions {
    fn default() -> Self {
        PwccaOptions { variance_kept: 0.99, ridge: 1e-8 }
    }
}

/// The pieces behind a score, for tests and diagnostics.
#[derive(Debug, Clone)]
pub struct PwccaDetail {
    pub score: f64,
    /// Components kept per view by variance truncation.
    pub kept: (usize, usize),
    /// Canonical correlations, descending.
    pub correlations: Vec<f64>,
    /// Projection weights aligned with `correlations`, summing to 1.
    pub weights: Vec<f64>,
}

pub fn pwcca(x: &RepresentationMatrix, y: &RepresentationMatrix) -> Result<f64> {
    pwcca_with(x, y, &PwccaOptions::default())
}

pub fn pwcca_with(
    x: &RepresentationMatrix,
    y: &RepresentationMatrix,
    options: &PwccaOptions,
) -> Result<f64> {
    Ok(pwcca_detailed(x, y, options)?.score)
}

pub fn pwcca_detailed(
    x: &RepresentationMatrix,
    y: &RepresentationMatrix,
    options: &PwccaOptions,
) -> Result<PwccaDetail> {
    if !(options.variance_kept > 0.0 && options.variance_kept <= 1.0) {
        return Err(Error::config(format!(
            "variance_kept {} must lie in (0, 1]",
            options.variance_kept
        )));
    }
    if !(options.ridge >= 0.0 && options.ridge.is_finite()) {
        return Err(Error::config(format!("ridge {} must be finite and >= 0", options.ridge)));
    }
    x.validate()?;
    y.validate()?;
    if x.items != y.items {
        return Err(Error::Misaligned(format!(
            "cannot correlate {:?} items with {:?} items",
            x.items, y.items
        )));
    }
    let n = x.n();
    if y.n() != n {
        return Err(Error::Misaligned(format!("row counts differ: {} vs {}", n, y.n())));
    }
    if n < 2 {
        return Err(Error::config("need at least two rows to correlate"));
    }

    let xt = truncate(&centered(x.rows.view()), options.variance_kept, "left")?;
    let yt = truncate(&centered(y.rows.view()), options.variance_kept, "right")?;
    let (dx, dy) = (xt.ncols(), yt.ncols());
    // centered subspaces of total dim >= n are forced to intersect, so
    // perfect correlations would appear with no signal behind them
    if n <= dx + dy {
        return Err(Error::config(format!(
            "{n} rows cannot support {dx}x{dy} retained dims; subsample more items or keep less variance"
        )));
    }

    let denom = (n - 1) as f64;
    let sxx = xt.transpose() * &xt / denom + DMatrix::identity(dx, dx) * options.ridge;
    let syy = yt.transpose() * &yt / denom + DMatrix::identity(dy, dy) * options.ridge;
    let sxy = xt.transpose() * &yt / denom;
    let wx = inv_sqrt(sxx);
    let wy = inv_sqrt(syy);

    let svd = (&wx * sxy * wy).svd(true, false);
    let u = svd.u.expect("u requested");
    let rho = svd.singular_values;
    let mut order: Vec<usize> = (0..rho.len()).collect();
    order.sort_by(|&a, &b| rho[b].total_cmp(&rho[a]));

    // weights: how much of the (truncated) left view's columns each
    // canonical variate h_i = X w_i accounts for, in summed |inner product|
    let variates = &xt * (wx * u);
    let projections = xt.transpose() * variates;
    let raw: Vec<f64> = (0..rho.len())
        .map(|i| projections.column(i).iter().map(|v| v.abs()).sum())
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::config("left view projects to nothing; degenerate input"));
    }

    let correlations: Vec<f64> = order.iter().map(|&i| rho[i]).collect();
    let weights: Vec<f64> = order.iter().map(|&i| raw[i] / total).collect();
    let score = correlations.iter().zip(&weights).map(|(r, a)| r * a).sum();
    Ok(PwccaDetail { score, kept: (dx, dy), correlations, weights })
}

fn centered(view: ArrayView2<f64>) -> DMatrix<f64> {
    let (n, d) = view.dim();
    let mut m = DMatrix::zeros(n, d);
    for j in 0..d {
        let mean = view.column(j).sum() / n as f64;
        for i in 0..n {
            m[(i, j)] = view[[i, j]] - mean;
        }
    }
    m
}

/// Project a centered view onto its top principal components, keeping the
/// smallest count whose squared singular values reach `variance_kept` of
/// the total.
fn truncate(data: &DMatrix<f64>, variance_kept: f64, side: &str) -> Result<DMatrix<f64>> {
    let svd = data.clone().svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let s = svd.singular_values;
    let total: f64 = s.iter().map(|v| v * v).sum();
    if !(total > 0.0) {
        return Err(Error::config(format!("{side} view has zero variance")));
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let mut kept = 0;
    let mut cum = 0.0;
    for &i in &order {
        kept += 1;
        cum += s[i] * s[i];
        if cum >= variance_kept * total {
            break;
        }
    }
    let proj = DMatrix::from_fn(data.ncols(), kept, |r, c| v_t[(order[c], r)]);
    Ok(data * proj)
}

/// Inverse square root of a symmetric positive-definite matrix.
fn inv_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let mut d = eig.eigenvalues;
    for v in d.iter_mut() {
        // ridge keeps true eigenvalues positive; the floor only guards
        // against rounding at the very bottom
        *v = 1.0 / v.max(f64::MIN_POSITIVE).sqrt();
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}
