//! Exposure-matrix reconstruction from balance-sheet aggregates by
//! iterative proportional fitting.
//!
//! The true bilateral network behind the GSII table is not public; this
//! stands in a matrix whose row and column sums match per-institution
//! interbank margins. Margins default to a fixed fraction of total
//! assets, the seed is the gravity product W_i·W_j, and sparsity is
//! controlled by keeping only the heaviest seed entries.

use nalgebra::DMatrix;

use crate::eba::EbaRecord;
use crate::{CliError, Result};

const MAX_SWEEPS: usize = 10_000;
const REL_TOL: f64 = 1e-6;

/// Builds an exposure matrix whose row and column sums both equal
/// `interbank_fraction`·W_i, with a zero diagonal. `target_density` keeps
/// that fraction of the off-diagonal entries (the heaviest by gravity
/// seed, ties resolved row-major) before balancing.
pub fn reconstruct_exposures(
    records: &[EbaRecord],
    interbank_fraction: f64,
    target_density: f64,
) -> Result<DMatrix<f64>> {
    if !(0.0..=1.0).contains(&interbank_fraction) {
        return Err(CliError::Config(format!(
            "interbank_fraction {interbank_fraction} outside [0,1]"
        )));
    }
    if !(target_density > 0.0 && target_density <= 1.0) {
        return Err(CliError::Config(format!("target_density {target_density} outside (0,1]")));
    }
    let n = records.len();
    if n < 2 {
        return Err(CliError::Config(format!("need at least 2 institutions, got {n}")));
    }
    let margins: Vec<f64> = records.iter().map(|r| interbank_fraction * r.assets).collect();
    if margins.iter().all(|&m| m == 0.0) {
        return Ok(DMatrix::zeros(n, n));
    }

    let mut x = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            records[i].assets * records[j].assets
        }
    });
    apply_density(&mut x, target_density);

    for _ in 0..MAX_SWEEPS {
        scale_rows(&mut x, &margins)?;
        scale_cols(&mut x, &margins)?;
        // Column sums are exact right after column scaling; only the rows
        // can still be off.
        let worst = (0..n)
            .map(|i| relative_gap(x.row(i).sum(), margins[i]))
            .fold(0.0, f64::max);
        if worst <= REL_TOL {
            return Ok(x);
        }
    }

    let worst = (0..n)
        .map(|i| relative_gap(x.row(i).sum(), margins[i]))
        .fold(0.0, f64::max);
    Err(CliError::Failed(format!(
        "exposure reconstruction did not converge after {MAX_SWEEPS} sweeps; \
         max relative margin residual {worst:.3e}"
    )))
}

fn relative_gap(sum: f64, margin: f64) -> f64 {
    if margin == 0.0 {
        sum.abs()
    } else {
        (sum - margin).abs() / margin
    }
}

/// Zeroes all but the `density` fraction of off-diagonal entries, keeping
/// the largest.
fn apply_density(x: &mut DMatrix<f64>, density: f64) {
    if density >= 1.0 {
        return;
    }
    let n = x.nrows();
    let mut entries: Vec<(usize, usize, f64)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j)
        .map(|(i, j)| (i, j, x[(i, j)]))
        .collect();
    entries.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then((a.0, a.1).cmp(&(b.0, b.1))));
    let keep = ((density * entries.len() as f64).ceil() as usize).max(1);
    for &(i, j, _) in &entries[keep.min(entries.len())..] {
        x[(i, j)] = 0.0;
    }
}

fn scale_rows(x: &mut DMatrix<f64>, margins: &[f64]) -> Result<()> {
    for i in 0..x.nrows() {
        let sum = x.row(i).sum();
        if sum == 0.0 {
            if margins[i] == 0.0 {
                continue;
            }
            return Err(CliError::Failed(format!(
                "institution {} has margin {} but no admissible counterparties; \
                 raise target_density",
                i + 1,
                margins[i]
            )));
        }
        let f = margins[i] / sum;
        for j in 0..x.ncols() {
            x[(i, j)] *= f;
        }
    }
    Ok(())
}

fn scale_cols(x: &mut DMatrix<f64>, margins: &[f64]) -> Result<()> {
    for j in 0..x.ncols() {
        let sum = x.column(j).sum();
        if sum == 0.0 {
            if margins[j] == 0.0 {
                continue;
            }
            return Err(CliError::Failed(format!(
                "institution {} has margin {} but no admissible lenders; raise target_density",
                j + 1,
                margins[j]
            )));
        }
        let f = margins[j] / sum;
        for i in 0..x.nrows() {
            x[(i, j)] *= f;
        }
    }
    Ok(())
}
