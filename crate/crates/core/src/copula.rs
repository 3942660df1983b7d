//! Gaussian latent-variable dependence: correlated default sampling and
//! joint default probabilities over sub-sets of nodes.
//!
//! A node defaults when its latent coordinate falls below Φ⁻¹(PD). The
//! latent vector is x = L·z with L the Cholesky factor of the correlation
//! sub-matrix and z iid standard normal, so joint probabilities are
//! rectangle probabilities under that sub-matrix.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math::{mvn, normal};
use crate::rng::{Namespace, StreamFactory};

/// Cholesky factor of a correlation sub-matrix plus the node ids its rows
/// stand for.
#[derive(Clone, Debug)]
pub struct CorrelationFactor {
    lower: DMatrix<f64>,
    index_map: Vec<usize>,
}

/// One correlated draw: latent values and the default indicators they
/// imply.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDraw {
    pub x: Vec<f64>,
    pub defaults: Vec<bool>,
}

/// How [`joint_default_prob`] evaluates the rectangle.
#[derive(Clone, Copy, Debug)]
pub enum JointProbMethod {
    /// Quadrature, exact to tolerance; at most 3 constrained dimensions.
    ExactSmall,
    /// Sampled frequency over `samples` correlated draws.
    MonteCarlo { samples: usize, seed: u64 },
}

/// A probability together with its Monte Carlo standard error (zero for
/// quadrature results).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Quadrature tolerance used by the exact-small route.
const EXACT_TOL: f64 = 1e-10;

/// Factorizes a correlation sub-matrix for sampling. `index_map[r]` names
/// the node id behind sub-matrix row r.
pub fn cholesky_factor(
    sigma_sub: &DMatrix<f64>,
    index_map: Vec<usize>,
) -> Result<CorrelationFactor> {
    let n = sigma_sub.nrows();
    if sigma_sub.ncols() != n || index_map.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "cholesky_factor: matrix {}x{}, index map {}",
            n,
            sigma_sub.ncols(),
            index_map.len()
        )));
    }
    let mut sorted = index_map.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != n {
        return Err(Error::InvalidParameter("cholesky_factor: index map repeats a node".into()));
    }
    for i in 0..n {
        if (sigma_sub[(i, i)] - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "cholesky_factor: diagonal at {i} is {}, must be 1",
                sigma_sub[(i, i)]
            )));
        }
        for j in 0..i {
            if (sigma_sub[(i, j)] - sigma_sub[(j, i)]).abs() > 1e-12 {
                return Err(Error::InvalidParameter(format!(
                    "cholesky_factor: not symmetric at ({i},{j})"
                )));
            }
        }
    }
    let chol = nalgebra::Cholesky::new(sigma_sub.clone()).ok_or_else(|| {
        Error::NotPositiveDefinite(format!("{n}x{n} correlation sub-matrix"))
    })?;
    Ok(CorrelationFactor { lower: chol.l(), index_map })
}

impl CorrelationFactor {
    pub fn dim(&self) -> usize {
        self.index_map.len()
    }

    pub fn index_map(&self) -> &[usize] {
        &self.index_map
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// One latent vector x = L·z.
    pub fn sample_latent<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.dim();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        (&self.lower * z).iter().copied().collect()
    }
}

/// Default threshold Φ⁻¹(PD) per node; PD = 1 maps to +∞ so the node
/// defaults on every draw.
pub fn default_thresholds(pds: &[f64]) -> Result<Vec<f64>> {
    pds.iter()
        .map(|&p| {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "default threshold: pd = {p} outside (0,1]"
                )));
            }
            Ok(if p == 1.0 { f64::INFINITY } else { normal::inv_cdf(p) })
        })
        .collect()
}

/// Draws one latent vector and thresholds it into default indicators.
pub fn sample_defaults<R: Rng + ?Sized>(
    pds: &[f64],
    factor: &CorrelationFactor,
    rng: &mut R,
) -> Result<LatentDraw> {
    if pds.len() != factor.dim() {
        return Err(Error::DimensionMismatch(format!(
            "sample_defaults: {} pds for factor of dim {}",
            pds.len(),
            factor.dim()
        )));
    }
    let thresholds = default_thresholds(pds)?;
    let x = factor.sample_latent(rng);
    let defaults = x.iter().zip(&thresholds).map(|(&xi, &ti)| xi < ti).collect();
    Ok(LatentDraw { x, defaults })
}

/// P(nodes in `default_set` default AND nodes in `survive_set` survive)
/// under the Gaussian dependence `sigma_sub`. Indices are positions into
/// `pds`; positions in neither set are marginalised out.
pub fn joint_default_prob(
    pds: &[f64],
    default_set: &[usize],
    survive_set: &[usize],
    sigma_sub: &DMatrix<f64>,
    method: JointProbMethod,
) -> Result<ProbEstimate> {
    let n = pds.len();
    if sigma_sub.nrows() != n || sigma_sub.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "joint_default_prob: {} pds, {}x{} matrix",
            n,
            sigma_sub.nrows(),
            sigma_sub.ncols()
        )));
    }
    for &i in default_set.iter().chain(survive_set) {
        if i >= n {
            return Err(Error::DimensionMismatch(format!(
                "joint_default_prob: index {i} out of range {n}"
            )));
        }
    }
    if default_set.iter().any(|i| survive_set.contains(i)) {
        return Err(Error::InvalidParameter(
            "joint_default_prob: default and survive sets overlap".into(),
        ));
    }
    let thresholds = default_thresholds(pds)?;

    match method {
        JointProbMethod::ExactSmall => {
            let mut lower = vec![f64::NEG_INFINITY; n];
            let mut upper = vec![f64::INFINITY; n];
            for &i in default_set {
                upper[i] = thresholds[i];
            }
            for &i in survive_set {
                lower[i] = thresholds[i];
            }
            let value = mvn::rect_prob(sigma_sub, &lower, &upper, EXACT_TOL)?;
            Ok(ProbEstimate { value, std_error: 0.0 })
        }
        JointProbMethod::MonteCarlo { samples, seed } => {
            if samples == 0 {
                return Err(Error::InvalidParameter("joint_default_prob: zero samples".into()));
            }
            let factor = cholesky_factor(sigma_sub, (1..=n).collect())?;
            let mut rng = StreamFactory::new(seed).stream(Namespace::Test, 0);
            let mut hits = 0usize;
            for _ in 0..samples {
                let x = factor.sample_latent(&mut rng);
                let ok = default_set.iter().all(|&i| x[i] < thresholds[i])
                    && survive_set.iter().all(|&i| x[i] >= thresholds[i]);
                if ok {
                    hits += 1;
                }
            }
            let p = hits as f64 / samples as f64;
            let se = (p * (1.0 - p) / samples as f64).sqrt();
            Ok(ProbEstimate { value: p, std_error: se })
        }
    }
}
