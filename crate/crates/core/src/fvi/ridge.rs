//! Ridge regression with cross-validated penalty selection.
//!
//! Intercept-free by design: the value ansatz is a pure linear form in the
//! loss features, and an all-defaulted row must map to exactly zero.
//! Columns are scaled to unit uncentered RMS before the solve so one
//! penalty acts evenly across features of very different magnitudes.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A fitted linear map y ≈ X·coeffs plus its selection diagnostics.
#[derive(Clone, Debug)]
pub struct RidgeFit {
    pub coeffs: DVector<f64>,
    /// The penalty the cross-validation picked.
    pub lambda: f64,
    /// Pooled out-of-fold uncentered R² at the chosen penalty.
    pub cv_r2: f64,
}

/// Solves (X'X + λ diag(s²)) b = X'y via Cholesky on the scaled system.
/// `scale[j]` is the uncentered RMS of column j (1 for an all-zero column,
/// leaving its coefficient exactly zero).
fn solve_scaled(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    scale: &[f64],
    lambda: f64,
) -> Option<DVector<f64>> {
    let p = x.ncols();
    let xs = DMatrix::from_fn(x.nrows(), p, |i, j| x[(i, j)] / scale[j]);
    let mut gram = xs.transpose() * &xs;
    for j in 0..p {
        gram[(j, j)] += lambda;
    }
    let rhs = xs.transpose() * y;
    let chol = gram.cholesky()?;
    let mut b = chol.solve(&rhs);
    for j in 0..p {
        b[j] /= scale[j];
    }
    Some(b)
}

/// Fits y ≈ X·b over a log-spaced λ grid with k-fold cross-validation
/// (folds by row index mod k) and refits the winner on all rows.
///
/// Selection follows the one-standard-error rule: among the penalties the
/// grid offers, the largest λ whose mean held-out MSE is within one
/// standard error (across folds) of the minimum. Plain argmin is brittle
/// here: these design matrices are small and near-collinear, and an
/// under-penalized fit that wins the CV score by noise can carry huge
/// canceling coefficients that misprice states off the training support.
pub fn ridge_cv(x: &DMatrix<f64>, y: &DVector<f64>, lambdas: &[f64], folds: usize) -> Result<RidgeFit> {
    let (n, p) = (x.nrows(), x.ncols());
    if n != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "ridge_cv: {n} rows vs {} targets",
            y.len()
        )));
    }
    if n == 0 || p == 0 || lambdas.is_empty() || folds < 2 {
        return Err(Error::InvalidParameter(
            "ridge_cv: need rows, columns, penalties and at least 2 folds".into(),
        ));
    }
    if n < folds * p {
        warn!("ridge_cv: {n} rows for {p} features across {folds} folds; fits may be unstable");
    }

    let scale: Vec<f64> = (0..p)
        .map(|j| {
            let ms = x.column(j).iter().map(|v| v * v).sum::<f64>() / n as f64;
            if ms > 0.0 {
                ms.sqrt()
            } else {
                1.0
            }
        })
        .collect();

    let y_ss: f64 = y.iter().map(|v| v * v).sum();
    // Per usable lambda: mean held-out MSE, its standard error across
    // folds, and the pooled residual sum for the R² diagnostic.
    let mut scored: Vec<(f64, f64, f64, f64)> = Vec::new(); // (lambda, mean, se, ss_res)
    for &lambda in lambdas {
        let mut fold_mse = Vec::with_capacity(folds);
        let mut ss_res = 0.0;
        let mut usable = true;
        for fold in 0..folds {
            let train: Vec<usize> = (0..n).filter(|i| i % folds != fold).collect();
            let test: Vec<usize> = (0..n).filter(|i| i % folds == fold).collect();
            if train.is_empty() || test.is_empty() {
                continue;
            }
            let xt = x.select_rows(train.as_slice());
            let yt = y.select_rows(train.as_slice());
            let Some(b) = solve_scaled(&xt, &yt, &scale, lambda) else {
                usable = false;
                break;
            };
            let mut ss = 0.0;
            for &i in &test {
                let pred: f64 = (0..p).map(|j| x[(i, j)] * b[j]).sum();
                ss += (y[i] - pred) * (y[i] - pred);
            }
            ss_res += ss;
            fold_mse.push(ss / test.len() as f64);
        }
        if !usable || fold_mse.is_empty() {
            continue;
        }
        let k = fold_mse.len() as f64;
        let mean = fold_mse.iter().sum::<f64>() / k;
        let var = fold_mse.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / k;
        scored.push((lambda, mean, (var / k).sqrt(), ss_res));
    }
    let &(_, best_mean, best_se, _) = scored
        .iter()
        .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite CV scores"))
        .ok_or_else(|| Error::FitFailed("ridge_cv: every penalty left the system singular".into()))?;
    let &(lambda, _, _, ss_res) = scored
        .iter()
        .filter(|&&(_, mean, _, _)| mean <= best_mean + best_se)
        .max_by(|a, b| a.0.partial_cmp(&b.0).expect("finite penalties"))
        .expect("the minimizing penalty itself always qualifies");
    let cv_r2 = if y_ss > 0.0 { 1.0 - ss_res / y_ss } else { 1.0 };

    let coeffs = solve_scaled(x, y, &scale, lambda)
        .ok_or_else(|| Error::FitFailed("ridge_cv: final refit is singular".into()))?;
    Ok(RidgeFit { coeffs, lambda, cv_r2 })
}
