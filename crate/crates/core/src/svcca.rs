//! Singular-vector canonical correlation analysis between activation sets.
//!
//! Given two matrices of activations (rows are samples, columns are neurons
//! or channels), the pipeline centers both, optionally projects each onto
//! the principal subspace covering a variance fraction, then computes the
//! canonical correlations as the singular values of the whitened
//! cross-covariance
//!
//! ```text
//! T = Cxx^(-1/2) Cxy Cyy^(-1/2)
//! ```
//!
//! Whitening uses symmetric eigendecompositions with an optional relative
//! ridge on the diagonals; with the ridge disabled, near-null directions
//! are dropped pseudo-inverse style. Everything runs in f64 regardless of
//! the input scalar.

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Float;

/// Activations of one layer: rows are samples (image-major, then spatial
/// positions), columns are channels.
#[derive(Clone, Debug)]
pub struct ActivationMatrix<S: Float> {
    pub layer: String,
    pub data: Array2<S>,
}

impl<S: Float> ActivationMatrix<S> {
    pub fn new(layer: impl Into<String>, data: Array2<S>) -> Self {
        ActivationMatrix {
            layer: layer.into(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }
}

/// The three covariance blocks of a centered pair.
#[derive(Clone, Debug)]
pub struct CovarianceTriple {
    pub cxx: DMatrix<f64>,
    pub cxy: DMatrix<f64>,
    pub cyy: DMatrix<f64>,
}

/// Knobs for the SVCCA pipeline.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvccaOptions {
    /// Fraction of variance the PCA step keeps per side; 1.0 keeps all
    /// non-degenerate directions.
    pub variance_keep: f64,
    /// Relative ridge added to the covariance diagonals, scaled by
    /// trace/dim. Zero disables regularization.
    pub ridge_scale: f64,
}

impl Default for SvccaOptions {
    fn default() -> Self {
        SvccaOptions {
            variance_keep: 0.99,
            ridge_scale: 1e-6,
        }
    }
}

impl SvccaOptions {
    /// No PCA, no ridge: the raw CCA used by oracle comparisons.
    pub fn exact() -> Self {
        SvccaOptions {
            variance_keep: 1.0,
            ridge_scale: 0.0,
        }
    }
}

/// Canonical correlations plus the bookkeeping needed to interpret them.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct CcaReport {
    /// Correlation coefficients, descending, clamped to [0, 1].
    pub coeffs: Vec<f64>,
    /// Mean of the coefficients: the scalar similarity score.
    pub mean: f64,
    /// Dimensions each side kept after the PCA step.
    pub kept_x: usize,
    pub kept_y: usize,
}

/// A report against its chance level.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub cca: CcaReport,
    /// Seed-averaged descending coefficients of shape-matched Gaussian noise.
    pub baseline: Vec<f64>,
    /// Mean of the baseline curve.
    pub baseline_mean: f64,
    /// Area between the two curves with indices normalized to [0, 1]:
    /// `cca.mean - baseline_mean`.
    pub auc_gap: f64,
}

fn to_dmatrix<S: Float>(x: &Array2<S>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)].as_f64())
}

fn check_input<S: Float>(x: &Array2<S>, name: &str) -> Result<()> {
    if x.nrows() <= x.ncols() {
        return Err(Error::TooFewRows {
            rows: x.nrows(),
            cols: x.ncols(),
        });
    }
    if x.iter().any(|v| !v.as_f64().is_finite()) {
        return Err(Error::NonFinite {
            context: format!("activation matrix {name}"),
        });
    }
    Ok(())
}

fn center(x: &mut DMatrix<f64>) {
    for j in 0..x.ncols() {
        let mean = x.column(j).sum() / x.nrows() as f64;
        for i in 0..x.nrows() {
            x[(i, j)] -= mean;
        }
    }
}

/// Covariances of centered matrices with the n-1 normalization.
pub fn covariance_triple(xc: &DMatrix<f64>, yc: &DMatrix<f64>) -> Result<CovarianceTriple> {
    if xc.nrows() != yc.nrows() {
        return Err(Error::RowCountMismatch {
            left: xc.nrows(),
            right: yc.nrows(),
        });
    }
    let denom = (xc.nrows() - 1).max(1) as f64;
    Ok(CovarianceTriple {
        cxx: xc.transpose() * xc / denom,
        cxy: xc.transpose() * yc / denom,
        cyy: yc.transpose() * yc / denom,
    })
}

/// Symmetric inverse square root with a relative floor on eigenvalues;
/// directions below the floor contribute nothing.
fn inv_sqrt(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite {
            context: context.to_string(),
        });
    }
    let floor = max * 1e-12;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| {
        if l > floor && l > 0.0 {
            1.0 / l.sqrt()
        } else {
            0.0
        }
    }));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

fn add_ridge(m: &mut DMatrix<f64>, scale: f64) {
    if scale <= 0.0 {
        return;
    }
    let eps = scale * m.trace() / m.nrows() as f64;
    for i in 0..m.nrows() {
        m[(i, i)] += eps;
    }
}

/// Canonical correlation coefficients of two centered data matrices.
///
/// Returns the singular values of the whitened cross-covariance, clamped to
/// [0, 1] and sorted descending.
pub fn cca_coefficients<S: Float>(
    x: &Array2<S>,
    y: &Array2<S>,
    ridge_scale: f64,
) -> Result<Vec<f64>> {
    check_input(x, "x")?;
    check_input(y, "y")?;
    let mut xm = to_dmatrix(x);
    let mut ym = to_dmatrix(y);
    center(&mut xm);
    center(&mut ym);
    cca_of_centered(&xm, &ym, ridge_scale)
}

fn cca_of_centered(xc: &DMatrix<f64>, yc: &DMatrix<f64>, ridge_scale: f64) -> Result<Vec<f64>> {
    let mut cov = covariance_triple(xc, yc)?;
    add_ridge(&mut cov.cxx, ridge_scale);
    add_ridge(&mut cov.cyy, ridge_scale);
    let wx = inv_sqrt(&cov.cxx, "x covariance")?;
    let wy = inv_sqrt(&cov.cyy, "y covariance")?;
    let t = wx * &cov.cxy * wy;
    let svd = t.svd(false, false);
    let mut coeffs: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|&s| s.clamp(0.0, 1.0))
        .collect();
    coeffs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(coeffs)
}

/// Project centered data onto the principal directions covering
/// `variance_keep` of the total variance. Returns the projected matrix.
fn pca_project(xc: &DMatrix<f64>, variance_keep: f64) -> DMatrix<f64> {
    let denom = (xc.nrows() - 1).max(1) as f64;
    let cov = xc.transpose() * xc / denom;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let total: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0)).sum();
    let floor = eig.eigenvalues[order[0]].max(0.0) * 1e-12;
    let mut kept = Vec::new();
    let mut acc = 0.0;
    for &j in &order {
        let l = eig.eigenvalues[j].max(0.0);
        if l <= floor && !kept.is_empty() {
            break;
        }
        kept.push(j);
        acc += l;
        if total > 0.0 && acc / total >= variance_keep {
            break;
        }
    }
    let basis = DMatrix::from_fn(xc.ncols(), kept.len(), |i, k| eig.eigenvectors[(i, kept[k])]);
    xc * basis
}

/// The full SVCCA pipeline: center, PCA per side, then CCA.
pub fn svcca<S: Float>(x: &Array2<S>, y: &Array2<S>, opts: &SvccaOptions) -> Result<CcaReport> {
    check_input(x, "x")?;
    check_input(y, "y")?;
    let mut xm = to_dmatrix(x);
    let mut ym = to_dmatrix(y);
    center(&mut xm);
    center(&mut ym);
    let xp = if opts.variance_keep < 1.0 {
        pca_project(&xm, opts.variance_keep)
    } else {
        xm
    };
    let yp = if opts.variance_keep < 1.0 {
        pca_project(&ym, opts.variance_keep)
    } else {
        ym
    };
    let coeffs = cca_of_centered(&xp, &yp, opts.ridge_scale)?;
    let mean = if coeffs.is_empty() {
        0.0
    } else {
        coeffs.iter().sum::<f64>() / coeffs.len() as f64
    };
    Ok(CcaReport {
        mean,
        kept_x: xp.ncols(),
        kept_y: yp.ncols(),
        coeffs,
    })
}

/// Descending SVCCA coefficients of shape-matched Gaussian noise, averaged
/// elementwise over `reps` seeded draws (curves truncated to the shortest).
pub fn random_baseline(
    rows: usize,
    cols_x: usize,
    cols_y: usize,
    opts: &SvccaOptions,
    reps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut curves: Vec<Vec<f64>> = Vec::with_capacity(reps);
    for r in 0..reps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(r as u64 + 1)));
        let x = Array2::from_shape_fn((rows, cols_x), |_| f64::standard_normal(&mut rng));
        let y = Array2::from_shape_fn((rows, cols_y), |_| f64::standard_normal(&mut rng));
        curves.push(svcca(&x, &y, opts)?.coeffs);
    }
    let k = curves.iter().map(Vec::len).min().unwrap_or(0);
    let mut mean = vec![0.0; k];
    for curve in &curves {
        for (m, c) in mean.iter_mut().zip(curve) {
            *m += c / reps as f64;
        }
    }
    Ok(mean)
}

/// SVCCA similarity with its chance level and the area gap between them.
pub fn correlation_report<S: Float>(
    x: &Array2<S>,
    y: &Array2<S>,
    opts: &SvccaOptions,
    baseline_reps: usize,
    seed: u64,
) -> Result<CorrelationReport> {
    let cca = svcca(x, y, opts)?;
    let baseline = random_baseline(x.nrows(), x.ncols(), y.ncols(), opts, baseline_reps, seed)?;
    let baseline_mean = baseline.iter().sum::<f64>() / baseline.len().max(1) as f64;
    Ok(CorrelationReport {
        auc_gap: cca.mean - baseline_mean,
        cca,
        baseline,
        baseline_mean,
    })
}
