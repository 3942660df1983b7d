//! Representative state portfolios: the regression rows for one backward
//! fitting step.
//!
//! States are built from a base state moved to the target time step, with
//! forced default sets U of growing size and with action-perturbed books,
//! so the fit sees the kinds of states the controlled process actually
//! visits. Every forced default propagates its impacts before the state
//! is emitted.

use std::collections::{BTreeSet, HashSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng;

use super::solver::SolverConfig;
use crate::mdp::{enumerate_actions, MdpConfig, MdpState};
use crate::network::{apply_impacts, apply_investment, FinancialNetwork};

fn state_at(network: FinancialNetwork, t: usize, horizon: usize) -> MdpState {
    let defaulted = network.defaulted_ids();
    MdpState { network, defaulted, t, horizon }
}

/// C(n, k) as a float; exact for the small arguments used here.
fn binomial(n: usize, k: usize) -> f64 {
    (1..=k).map(|i| (n - k + i) as f64 / i as f64).product()
}

/// One random default set over `n_act` positions: |U| drawn from
/// {2..=max_multi ∩ n_act} with P(|U| = u) ∝ C(n_act, u)·e^{−u}, then a
/// uniform subset of that size, so each individual set has probability
/// proportional to e^{−|U|}. Public so the sampling law can be verified
/// statistically from outside the crate.
pub fn sample_multi_set<R: Rng + ?Sized>(
    n_act: usize,
    max_multi: usize,
    rng: &mut R,
) -> Vec<usize> {
    let sizes: Vec<usize> = (2..=max_multi.min(n_act)).collect();
    assert!(!sizes.is_empty(), "sample_multi_set: no admissible set size");
    let weights: Vec<f64> =
        sizes.iter().map(|&u| binomial(n_act, u) * (-(u as f64)).exp()).collect();
    let pick = WeightedIndex::new(&weights).expect("positive weights");
    let u = sizes[pick.sample(rng)];
    let mut positions = index::sample(rng, n_act, u).into_vec();
    positions.sort_unstable();
    positions
}

/// States used as regression rows when fitting the coefficients at time
/// `t`: the base state moved to `t`, every single-default variant, random
/// multi-default variants, and action-perturbed variants (each with and
/// without one forced default). Duplicates are removed keeping the first
/// occurrence, so the result is deterministic under the given generator.
pub fn representative_portfolio<R: Rng + ?Sized>(
    s0: &MdpState,
    t: usize,
    mdp_cfg: &MdpConfig,
    solver_cfg: &SolverConfig,
    rng: &mut R,
) -> Vec<MdpState> {
    assert!(t < s0.horizon, "representative_portfolio: t = {t} at horizon {}", s0.horizon);
    let mut base = s0.clone();
    base.t = t;
    let active = base.network.active_ids();
    let n_act = active.len();

    let mut out: Vec<MdpState> = vec![base.clone()];

    for &id in &active {
        let net = apply_impacts(&base.network, &BTreeSet::from([id]));
        out.push(state_at(net, t, base.horizon));
    }

    if solver_cfg.multi_sets > 0 && n_act >= 2 && solver_cfg.max_multi >= 2 {
        for _ in 0..solver_cfg.multi_sets {
            let set: BTreeSet<usize> = sample_multi_set(n_act, solver_cfg.max_multi, rng)
                .into_iter()
                .map(|pos| active[pos])
                .collect();
            let net = apply_impacts(&base.network, &set);
            out.push(state_at(net, t, base.horizon));
        }
    }

    if solver_cfg.action_variants > 0 && n_act > 0 {
        let nonzero: Vec<_> =
            enumerate_actions(&base, mdp_cfg).into_iter().filter(|a| !a.is_zero()).collect();
        let chosen: Vec<usize> = if nonzero.len() > solver_cfg.action_variants {
            let mut idx = index::sample(rng, nonzero.len(), solver_cfg.action_variants).into_vec();
            idx.sort_unstable();
            idx
        } else {
            (0..nonzero.len()).collect()
        };
        for i in chosen {
            let invested = apply_investment(&base.network, &nonzero[i].delta_j)
                .expect("enumerated actions only target active nodes");
            out.push(state_at(invested.clone(), t, base.horizon));
            let forced = active[rng.random_range(0..n_act)];
            let net = apply_impacts(&invested, &BTreeSet::from([forced]));
            out.push(state_at(net, t, base.horizon));
        }
    }

    let mut seen = HashSet::new();
    out.retain(|s| seen.insert(s.canonical_key()));
    out
}
