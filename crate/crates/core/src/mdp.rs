//! The bailout decision process: states over the network, capital-injection
//! actions, one-step dynamics with taxpayer-loss rewards, exact transition
//! probabilities on small networks and episode rollouts.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::copula::{cholesky_factor, default_thresholds, sample_defaults, LatentDraw};
use crate::error::{Error, Result};
use crate::math::mvn;
use crate::network::{apply_impacts, apply_investment, taxpayer_loss, FinancialNetwork};

/// A decision-process state: the network as of time `t` plus the set of
/// nodes that have defaulted so far.
#[derive(Clone, Debug, PartialEq)]
pub struct MdpState {
    pub network: FinancialNetwork,
    /// Ids of defaulted nodes; non-decreasing along any trajectory.
    pub defaulted: BTreeSet<usize>,
    pub t: usize,
    pub horizon: usize,
}

impl MdpState {
    /// Fresh state at t = 0. The defaulted set is read off the network.
    pub fn initial(network: FinancialNetwork, horizon: usize) -> Self {
        let defaulted = network.defaulted_ids();
        Self { network, defaulted, t: 0, horizon }
    }

    /// Steps remaining until the episode ends.
    pub fn time_to_maturity(&self) -> usize {
        self.horizon - self.t
    }

    /// Pre-investment default probabilities of the active nodes, in
    /// ascending id order alongside `network.active_ids()`.
    pub fn active_pds(&self) -> Vec<f64> {
        self.network
            .nodes()
            .iter()
            .filter(|n| n.active())
            .map(|n| n.default_prob())
            .collect()
    }

    /// Active nodes whose current PD exceeds the risky threshold.
    pub fn risky_ids(&self, threshold: f64) -> Vec<usize> {
        self.network
            .nodes()
            .iter()
            .filter(|n| n.active() && n.default_prob() > threshold)
            .map(|n| n.id)
            .collect()
    }

    /// Canonical identity of the state with balance sheets quantized at
    /// 1e-9 absolute: default and forced flags plus (W, E, J) per node,
    /// then t. Impacts are exact sums of exposures, so distinct reachable
    /// states never collide at this resolution.
    pub fn canonical_key(&self) -> Vec<i64> {
        let mut key = Vec::with_capacity(5 * self.network.len() + 1);
        for node in self.network.nodes() {
            key.push(node.defaulted as i64);
            key.push(node.forced_default as i64);
            key.push((node.assets * 1e9).round() as i64);
            key.push((node.equity * 1e9).round() as i64);
            key.push((node.gov_investment * 1e9).round() as i64);
        }
        key.push(self.t as i64);
        key
    }
}

/// A government action: per-node capital injections.
///
/// Labels follow the `<node>@<tenths of a percent of W>` notation; node 0
/// means every risky node, so "0@15" injects 1.5% of each risky node's
/// assets and "8@05" injects 0.5% of node 8's assets into node 8 alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvestmentAction {
    pub delta_j: Vec<f64>,
    pub label: String,
}

impl InvestmentAction {
    pub fn zero(n: usize) -> Self {
        Self { delta_j: vec![0.0; n], label: "0@0".into() }
    }

    pub fn is_zero(&self) -> bool {
        self.delta_j.iter().all(|&d| d == 0.0)
    }

    /// Total capital injected across nodes.
    pub fn total(&self) -> f64 {
        self.delta_j.iter().sum()
    }
}

/// Result of one sampled step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub next_state: MdpState,
    /// Non-positive; zero exactly when nothing defaulted this step.
    pub reward: f64,
    pub defaults_this_step: BTreeSet<usize>,
    /// The latent draw behind the defaults, for audit.
    pub latent_draw: LatentDraw,
}

/// Which actions the government may compose.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetingMode {
    /// Invest in one risky node or uniformly in all of them.
    SingleOrAll,
    /// Only the uniform all-risky actions.
    AllRiskyUniform,
}

/// Decision-process parameters shared by the solver and the experiment
/// drivers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MdpConfig {
    pub horizon: usize,
    /// Discount factor, in [0, 1).
    pub gamma: f64,
    /// Injection sizes in basis points of the target's current assets;
    /// must contain 0.
    pub levels_bp: Vec<u32>,
    pub targeting: TargetingMode,
    /// A node is risky when its PD exceeds this.
    pub risky_threshold: f64,
    pub seed: u64,
    /// Default sample count for Monte Carlo evaluations driven off this
    /// config.
    pub samples: usize,
}

impl MdpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidParameter(format!("gamma = {} outside [0,1)", self.gamma)));
        }
        if !self.levels_bp.contains(&0) {
            return Err(Error::InvalidParameter("levels_bp must contain 0".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be >= 1".into()));
        }
        Ok(())
    }

    /// Nonzero levels, ascending, deduplicated.
    pub fn nonzero_levels(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.levels_bp.iter().copied().filter(|&l| l > 0).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

impl Default for MdpConfig {
    fn default() -> Self {
        Self {
            horizon: 7,
            gamma: 0.98,
            levels_bp: vec![0, 50, 100, 150, 200],
            targeting: TargetingMode::SingleOrAll,
            risky_threshold: 0.009,
            seed: 0,
            samples: 20_000,
        }
    }
}

fn level_label(bp: u32) -> String {
    format!("{:02}", bp / 10)
}

fn injection(level_bp: u32, assets: f64) -> f64 {
    level_bp as f64 * 1e-4 * assets
}

/// All legal actions at `s`, deterministically ordered: the zero action,
/// then single-node actions by (node id, level), then all-risky actions by
/// level. Duplicate injection vectors keep their first occurrence.
pub fn enumerate_actions(s: &MdpState, cfg: &MdpConfig) -> Vec<InvestmentAction> {
    let risky: Vec<(usize, f64)> = s
        .risky_ids(cfg.risky_threshold)
        .into_iter()
        .map(|id| (id, s.network.node(id).assets))
        .collect();
    actions_from_profile(s.network.len(), &risky, cfg)
}

/// Action set over an explicit risky profile: `(node id, asset base)` pairs
/// in ascending id order. Injection sizes are basis points of the given
/// base. Shared by state enumeration and the deterministic feature path,
/// which gates offsets on projected rather than realized books.
pub(crate) fn actions_from_profile(
    n: usize,
    risky: &[(usize, f64)],
    cfg: &MdpConfig,
) -> Vec<InvestmentAction> {
    let levels = cfg.nonzero_levels();

    let mut actions = vec![InvestmentAction::zero(n)];
    if cfg.targeting == TargetingMode::SingleOrAll {
        for &(id, assets) in risky {
            for &bp in &levels {
                let mut delta_j = vec![0.0; n];
                delta_j[id - 1] = injection(bp, assets);
                actions.push(InvestmentAction {
                    delta_j,
                    label: format!("{id}@{}", level_label(bp)),
                });
            }
        }
    }
    for &bp in &levels {
        let mut delta_j = vec![0.0; n];
        for &(id, assets) in risky {
            delta_j[id - 1] = injection(bp, assets);
        }
        actions.push(InvestmentAction { delta_j, label: format!("0@{}", level_label(bp)) });
    }

    let mut seen = BTreeSet::new();
    actions.retain(|a| seen.insert(a.delta_j.iter().map(|d| d.to_bits()).collect::<Vec<_>>()));
    actions
}

/// Post-investment default probabilities over the active nodes of `net`,
/// ascending id order. The forced flag overrides the balance sheet.
fn active_pds_of(net: &FinancialNetwork) -> Vec<f64> {
    net.nodes().iter().filter(|n| n.active()).map(|n| n.default_prob()).collect()
}

/// Samples one transition: invest, draw correlated defaults, collect the
/// taxpayer loss on the post-investment books, propagate impacts.
pub fn step<R: Rng + ?Sized>(
    s: &MdpState,
    a: &InvestmentAction,
    rng: &mut R,
) -> Result<StepOutcome> {
    if s.t >= s.horizon {
        return Err(Error::EpisodeOver { t: s.t, horizon: s.horizon });
    }
    let invested = apply_investment(&s.network, &a.delta_j)?;
    let active = invested.active_ids();
    if active.is_empty() {
        return Ok(StepOutcome {
            next_state: MdpState {
                network: invested,
                defaulted: s.defaulted.clone(),
                t: s.t + 1,
                horizon: s.horizon,
            },
            reward: 0.0,
            defaults_this_step: BTreeSet::new(),
            latent_draw: LatentDraw { x: vec![], defaults: vec![] },
        });
    }

    let pds = active_pds_of(&invested);
    let factor = cholesky_factor(&invested.correlation_sub(&active), active.clone())?;
    let draw = sample_defaults(&pds, &factor, rng)?;

    let defaults_now: BTreeSet<usize> = active
        .iter()
        .zip(&draw.defaults)
        .filter_map(|(&id, &d)| d.then_some(id))
        .collect();
    let reward: f64 =
        -defaults_now.iter().map(|&id| taxpayer_loss(invested.node(id))).sum::<f64>();

    let next_network = apply_impacts(&invested, &defaults_now);
    let mut defaulted = s.defaulted.clone();
    defaulted.extend(defaults_now.iter().copied());

    Ok(StepOutcome {
        next_state: MdpState { network: next_network, defaulted, t: s.t + 1, horizon: s.horizon },
        reward,
        defaults_this_step: defaults_now,
        latent_draw: draw,
    })
}

/// Exact probability of the transition `s` --a--> `s_next`.
///
/// Unreachable successors get 0. The rectangle is evaluated to absolute
/// tolerance `tol`; the constrained dimension count is capped by the
/// quadrature (at most 3 active nodes with PD < 1).
pub fn transition_prob(
    s: &MdpState,
    a: &InvestmentAction,
    s_next: &MdpState,
    tol: f64,
) -> Result<f64> {
    if s_next.t != s.t + 1 || s_next.horizon != s.horizon || s.t >= s.horizon {
        return Ok(0.0);
    }
    if !s.defaulted.is_subset(&s_next.defaulted) {
        return Ok(0.0);
    }
    let defaults_now: BTreeSet<usize> =
        s_next.defaulted.difference(&s.defaulted).copied().collect();

    let invested = apply_investment(&s.network, &a.delta_j)?;
    if defaults_now.iter().any(|&id| !invested.node(id).active()) {
        return Ok(0.0);
    }
    let expected = apply_impacts(&invested, &defaults_now);
    let coherent = expected.nodes().iter().zip(s_next.network.nodes()).all(|(e, g)| {
        e.defaulted == g.defaulted
            && e.forced_default == g.forced_default
            && (e.assets - g.assets).abs() <= 1e-9
            && (e.equity - g.equity).abs() <= 1e-9
            && (e.gov_investment - g.gov_investment).abs() <= 1e-9
    });
    if !coherent {
        return Ok(0.0);
    }

    let active = invested.active_ids();
    if active.is_empty() {
        return Ok(1.0);
    }
    let pds = active_pds_of(&invested);
    let thresholds = default_thresholds(&pds)?;
    let mut lower = vec![f64::NEG_INFINITY; active.len()];
    let mut upper = vec![f64::INFINITY; active.len()];
    for (pos, &id) in active.iter().enumerate() {
        if defaults_now.contains(&id) {
            upper[pos] = thresholds[pos];
        } else {
            lower[pos] = thresholds[pos];
        }
    }
    mvn::rect_prob(&invested.correlation_sub(&active), &lower, &upper, tol)
}

/// Closed-form expected reward of one step: −Σ PD_i^a·L_i^a over active
/// nodes, with PD and L evaluated on the post-investment books.
pub fn expected_one_step_reward(s: &MdpState, a: &InvestmentAction) -> Result<f64> {
    let invested = apply_investment(&s.network, &a.delta_j)?;
    Ok(-invested
        .nodes()
        .iter()
        .filter(|n| n.active())
        .map(|n| n.default_prob() * taxpayer_loss(n))
        .sum::<f64>())
}

/// Discounted sum Σ γᵗ·r_t.
pub fn cumulative_reward(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().enumerate().map(|(t, &r)| gamma.powi(t as i32) * r).sum()
}

/// One line of an episode audit trail.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub t: usize,
    pub action: String,
    pub defaults: Vec<usize>,
    pub reward: f64,
}

/// Rolls the policy out to the horizon; returns the trajectory and the
/// discounted cumulative reward.
pub fn simulate_episode<R: Rng + ?Sized>(
    s0: &MdpState,
    mut policy: impl FnMut(&MdpState) -> InvestmentAction,
    gamma: f64,
    rng: &mut R,
) -> Result<(Vec<EpisodeRecord>, f64)> {
    let mut state = s0.clone();
    let mut records = Vec::with_capacity(state.time_to_maturity());
    let mut rewards = Vec::with_capacity(state.time_to_maturity());
    while state.t < state.horizon {
        let action = policy(&state);
        let outcome = step(&state, &action, rng)?;
        records.push(EpisodeRecord {
            t: state.t,
            action: action.label.clone(),
            defaults: outcome.defaults_this_step.iter().copied().collect(),
            reward: outcome.reward,
        });
        rewards.push(outcome.reward);
        state = outcome.next_state;
    }
    Ok((records, cumulative_reward(&rewards, gamma)))
}
