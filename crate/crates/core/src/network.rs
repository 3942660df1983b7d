//! Balance-sheet dynamics of the financial network: structural-model
//! default probabilities, volatility calibration, default impacts,
//! taxpayer losses and capital injections.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::normal;

/// One financial institution.
///
/// The liability B = W − E is derived, never stored. `forced_default`
/// marks a node whose equity was wiped out by impacts: it is still active
/// but defaults with probability one at the next step, regardless of any
/// later investment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankNode {
    /// Stable 1-based id; equals position in the network's node list + 1.
    pub id: usize,
    pub label: String,
    /// Total asset W.
    pub assets: f64,
    /// Equity (Tier 1 capital) E.
    pub equity: f64,
    /// Drift per time step.
    pub mu: f64,
    /// Asset volatility per time step.
    pub sigma: f64,
    /// Loss given default on the government stake, in [0, 1].
    pub lgd: f64,
    /// Taxpayer-loss fraction of total assets on default, in [0, 1].
    pub alpha: f64,
    /// Cumulative government investment J.
    pub gov_investment: f64,
    /// Lower bound for the evaluated PD.
    pub pd_floor: f64,
    pub defaulted: bool,
    pub forced_default: bool,
}

impl BankNode {
    /// Derived liability B = W − E.
    pub fn liability(&self) -> f64 {
        self.assets - self.equity
    }

    /// Node is neither defaulted nor frozen out of the system.
    pub fn active(&self) -> bool {
        !self.defaulted
    }

    /// Per-step default probability on the current balance sheet.
    /// The forced flag wins over anything the balance sheet says.
    pub fn default_prob(&self) -> f64 {
        if self.forced_default {
            return 1.0;
        }
        merton_pd(self.assets, self.equity, self.mu, self.sigma, self.pd_floor)
            .expect("active node has a valid balance sheet")
    }

    fn validate(&self, idx: usize) -> Result<()> {
        if self.id != idx + 1 {
            return Err(Error::InvalidParameter(format!(
                "node at position {idx} has id {}, expected {}",
                self.id,
                idx + 1
            )));
        }
        if !(0.0..=1.0).contains(&self.lgd) || !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!(
                "node {}: lgd and alpha must lie in [0,1]",
                self.id
            )));
        }
        if self.gov_investment < 0.0 {
            return Err(Error::InvalidParameter(format!("node {}: J < 0", self.id)));
        }
        if !(self.pd_floor > 0.0 && self.pd_floor < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "node {}: pd_floor must lie in (0,1)",
                self.id
            )));
        }
        if self.sigma <= 0.0 {
            return Err(Error::InvalidParameter(format!("node {}: sigma <= 0", self.id)));
        }
        // Active healthy nodes satisfy 0 < E <= W; forced or defaulted
        // nodes may carry wiped-out equity.
        if !self.defaulted && !self.forced_default {
            if !(self.equity > 0.0 && self.equity <= self.assets) {
                return Err(Error::InvalidParameter(format!(
                    "node {}: requires 0 < E <= W, got E={}, W={}",
                    self.id, self.equity, self.assets
                )));
            }
        }
        Ok(())
    }
}

/// The interbank system: nodes, exposure matrix and default correlation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinancialNetwork {
    nodes: Vec<BankNode>,
    /// exposure[(i, j)] = loss node i+1 takes when node j+1 defaults.
    exposure: DMatrix<f64>,
    /// Latent-factor correlation, unit diagonal, positive semi-definite.
    correlation: DMatrix<f64>,
}

impl FinancialNetwork {
    pub fn new(
        nodes: Vec<BankNode>,
        exposure: DMatrix<f64>,
        correlation: DMatrix<f64>,
    ) -> Result<Self> {
        let n = nodes.len();
        if exposure.nrows() != n || exposure.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "exposure is {}x{}, expected {n}x{n}",
                exposure.nrows(),
                exposure.ncols()
            )));
        }
        if correlation.nrows() != n || correlation.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "correlation is {}x{}, expected {n}x{n}",
                correlation.nrows(),
                correlation.ncols()
            )));
        }
        for (idx, node) in nodes.iter().enumerate() {
            node.validate(idx)?;
        }
        for i in 0..n {
            if exposure[(i, i)] != 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "exposure diagonal w[{0},{0}] = {1}, must be 0",
                    i + 1,
                    exposure[(i, i)]
                )));
            }
            for j in 0..n {
                if exposure[(i, j)] < 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "exposure w[{},{}] = {} < 0",
                        i + 1,
                        j + 1,
                        exposure[(i, j)]
                    )));
                }
            }
        }
        for i in 0..n {
            if (correlation[(i, i)] - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidParameter(format!(
                    "correlation diagonal at {} is {}, must be 1",
                    i + 1,
                    correlation[(i, i)]
                )));
            }
            for j in 0..i {
                if (correlation[(i, j)] - correlation[(j, i)]).abs() > 1e-12 {
                    return Err(Error::InvalidParameter(format!(
                        "correlation not symmetric at ({},{})",
                        i + 1,
                        j + 1
                    )));
                }
                if correlation[(i, j)].abs() > 1.0 {
                    return Err(Error::InvalidParameter(format!(
                        "correlation [{},{}] = {} outside [-1,1]",
                        i + 1,
                        j + 1,
                        correlation[(i, j)]
                    )));
                }
            }
        }
        let min_eig = correlation
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-10 {
            return Err(Error::NotPositiveDefinite(format!(
                "smallest correlation eigenvalue {min_eig:e}"
            )));
        }
        Ok(Self { nodes, exposure, correlation })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[BankNode] {
        &self.nodes
    }

    /// Node by 1-based id.
    pub fn node(&self, id: usize) -> &BankNode {
        &self.nodes[id - 1]
    }

    pub fn exposure(&self) -> &DMatrix<f64> {
        &self.exposure
    }

    pub fn correlation(&self) -> &DMatrix<f64> {
        &self.correlation
    }

    /// Exposure of node `i` to the default of node `j` (1-based ids).
    pub fn exposure_between(&self, i: usize, j: usize) -> f64 {
        self.exposure[(i - 1, j - 1)]
    }

    /// Ids of non-defaulted nodes, ascending.
    pub fn active_ids(&self) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.active()).map(|n| n.id).collect()
    }

    /// Ids of defaulted nodes, ascending.
    pub fn defaulted_ids(&self) -> BTreeSet<usize> {
        self.nodes.iter().filter(|n| n.defaulted).map(|n| n.id).collect()
    }

    /// Correlation sub-matrix over the given 1-based ids, in id order.
    pub fn correlation_sub(&self, ids: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(ids.len(), ids.len(), |r, c| {
            self.correlation[(ids[r] - 1, ids[c] - 1)]
        })
    }
}

/// Merton per-step default probability on a balance sheet.
///
/// Returns max{1 − Φ((ln(W/(W−E)) + μ − σ²/2)/σ), pd_floor}. E ≤ 0 is a
/// wiped-out balance sheet and returns exactly 1. E = W (zero liability)
/// sends the Merton term to 0 and returns the floor.
pub fn merton_pd(assets: f64, equity: f64, mu: f64, sigma: f64, pd_floor: f64) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(Error::InvalidParameter(format!("merton_pd: sigma = {sigma} <= 0")));
    }
    if assets <= 0.0 {
        return Err(Error::InvalidParameter(format!("merton_pd: W = {assets} <= 0")));
    }
    if !(pd_floor > 0.0 && pd_floor < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "merton_pd: pd_floor = {pd_floor} outside (0,1)"
        )));
    }
    if equity > assets {
        return Err(Error::InvalidParameter(format!(
            "merton_pd: E = {equity} > W = {assets}"
        )));
    }
    if equity <= 0.0 {
        return Ok(1.0);
    }
    if equity == assets {
        return Ok(pd_floor);
    }
    let d = ((assets / (assets - equity)).ln() + mu - 0.5 * sigma * sigma) / sigma;
    // Upper tail as Phi(-d), not 1 - Phi(d): the latter rounds to 0 once
    // Phi(d) is within an ulp of 1, wiping out deep-tail monotonicity.
    let pd = normal::cdf(-d);
    Ok(pd.max(pd_floor).min(1.0))
}

/// Volatility that reproduces `pd0` on the given balance sheet.
///
/// Solves σ²/2 + σ·Φ⁻¹(1−pd0) − c = 0 with c = ln(W/(W−E)) + μ, taking the
/// positive quadratic root σ = −q + sqrt(q² + 2c). Round-trips through
/// [`merton_pd`] to 1e−10 relative.
pub fn calibrate_sigma(assets: f64, equity: f64, mu: f64, pd0: f64) -> Result<f64> {
    if !(pd0 > 0.0 && pd0 < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "calibrate_sigma: pd0 = {pd0} outside (0,1)"
        )));
    }
    if !(equity > 0.0 && equity < assets) {
        return Err(Error::InvalidParameter(format!(
            "calibrate_sigma: requires 0 < E < W, got E={equity}, W={assets}"
        )));
    }
    let c = (assets / (assets - equity)).ln() + mu;
    if c <= 0.0 {
        return Err(Error::NoVolatilitySolution { node: 0, c });
    }
    // Phi^{-1}(1 - pd0) = -Phi^{-1}(pd0), exact even for tiny pd0.
    let q = -normal::inv_cdf(pd0);
    Ok(-q + (q * q + 2.0 * c).sqrt())
}

/// Taxpayer loss if this node defaults right now: α·W + J·LGD.
pub fn taxpayer_loss(node: &BankNode) -> f64 {
    node.alpha * node.assets + node.gov_investment * node.lgd
}

/// Marks `defaults_now` defaulted and propagates their impacts.
///
/// Every surviving node i loses I_i = Σ_{j ∈ defaults_now} w_ij from both
/// W and E (B is conserved); equity at or below zero raises the
/// forced-default flag. Nodes defaulting now freeze at their pre-impact
/// balance sheets; already-defaulted nodes never change.
///
/// # Panics
/// Panics if `defaults_now` names a node that is missing or already
/// defaulted.
pub fn apply_impacts(net: &FinancialNetwork, defaults_now: &BTreeSet<usize>) -> FinancialNetwork {
    for &id in defaults_now {
        assert!(
            id >= 1 && id <= net.len() && net.node(id).active(),
            "apply_impacts: node {id} is not active"
        );
    }
    let mut out = net.clone();
    for node in &mut out.nodes {
        if defaults_now.contains(&node.id) {
            node.defaulted = true;
            continue;
        }
        if node.defaulted {
            continue;
        }
        let impact: f64 = defaults_now.iter().map(|&j| net.exposure_between(node.id, j)).sum();
        if impact == 0.0 {
            continue;
        }
        node.assets -= impact;
        node.equity -= impact;
        if node.equity <= 0.0 {
            node.forced_default = true;
        }
    }
    out
}

/// Injects government capital: W, E and J each grow by ΔJ per node.
///
/// Rejects negative entries and any injection into a defaulted node.
pub fn apply_investment(net: &FinancialNetwork, delta_j: &[f64]) -> Result<FinancialNetwork> {
    if delta_j.len() != net.len() {
        return Err(Error::DimensionMismatch(format!(
            "apply_investment: {} entries for {} nodes",
            delta_j.len(),
            net.len()
        )));
    }
    for (node, &dj) in net.nodes.iter().zip(delta_j) {
        if dj < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "apply_investment: negative injection {dj} for node {}",
                node.id
            )));
        }
        if dj > 0.0 && node.defaulted {
            return Err(Error::InvalidParameter(format!(
                "apply_investment: node {} is defaulted",
                node.id
            )));
        }
    }
    let mut out = net.clone();
    for (node, &dj) in out.nodes.iter_mut().zip(delta_j) {
        node.assets += dj;
        node.equity += dj;
        node.gov_investment += dj;
    }
    Ok(out)
}
