//! Deterministic per-node loss features for the value ansatz.
//!
//! For a state with m steps to maturity and a candidate action sequence
//! a_1..a_m, each active node i gets entries Z_ik, k = 1..m: the expected
//! direct taxpayer loss from node i defaulting exactly at step offset k,
//! discounted and weighted by its survival through offsets 1..k-1. The
//! entries are closed-form in the deterministic projections of impacts
//! (I_ik), cumulative injections (J_ik) and the resulting default
//! probabilities, so no sampling is involved.

use nalgebra::DMatrix;

use crate::mdp::{actions_from_profile, InvestmentAction, MdpConfig, MdpState};
use crate::network::merton_pd;

/// The feature matrix of one state under one action sequence.
#[derive(Clone, Debug)]
pub struct ZMatrix {
    /// Active node ids, ascending; row order of `entries`.
    pub node_ids: Vec<usize>,
    /// entries[(row, k-1)] = Z_ik; all non-negative.
    pub entries: DMatrix<f64>,
    /// The sequence a_1..a_m the entries were computed under.
    pub actions: Vec<InvestmentAction>,
}

impl ZMatrix {
    /// Number of step offsets m.
    pub fn offsets(&self) -> usize {
        self.entries.ncols()
    }

    /// Total expected direct loss: the sum of all entries.
    pub fn total_loss(&self) -> f64 {
        self.entries.iter().sum()
    }
}

/// Per-node deterministic path quantities at one offset.
struct PathStep {
    /// PD_ik of every active node (row order), this offset.
    pd: Vec<f64>,
    /// Projected assets before this offset's injection, per active node.
    assets_base: Vec<f64>,
}

/// Shared recursion engine: walks offsets 1..=m, calling `on_offset` with
/// the path state before injection at each offset (for action gating), and
/// filling Z entries. `actions` is read through a callback so the greedy
/// search can grow the sequence as it walks.
fn z_recursion(
    s: &MdpState,
    m: usize,
    gamma: f64,
    mut action_at: impl FnMut(usize, &PathStep) -> InvestmentAction,
) -> (ZMatrix, Vec<InvestmentAction>) {
    assert!(m >= 1, "z_recursion: need at least one offset");
    let net = &s.network;
    let active = net.active_ids();
    let na = active.len();

    let mut entries = DMatrix::zeros(na, m);
    // Row-indexed path state: per node, PD at each past offset, survival
    // product through the last offset, cumulative impact and injection.
    let mut pd_hist: Vec<Vec<f64>> = vec![Vec::with_capacity(m); na];
    let mut survival: Vec<f64> = vec![1.0; na];
    let mut impact: Vec<f64> = vec![0.0; na];
    let mut injected: Vec<f64> = vec![0.0; na];
    let mut chosen: Vec<InvestmentAction> = Vec::with_capacity(m);

    for k in 1..=m {
        // I_ik grows by every other node's chance of defaulting at the
        // previous offset, weighted by its survival up to there.
        if k >= 2 {
            let growth: Vec<f64> = (0..na)
                .map(|p| {
                    (0..na)
                        .filter(|&q| q != p)
                        .map(|q| {
                            pd_hist[q][k - 2]
                                * net.exposure_between(active[p], active[q])
                                * survival_through(&pd_hist[q], k - 2)
                        })
                        .sum()
                })
                .collect();
            for (p, g) in growth.into_iter().enumerate() {
                impact[p] += g;
            }
        }

        let assets_base: Vec<f64> =
            (0..na).map(|p| net.node(active[p]).assets + injected[p] - impact[p]).collect();
        let pd_base: Vec<f64> = (0..na)
            .map(|p| {
                let node = net.node(active[p]);
                path_pd(
                    assets_base[p],
                    node.equity + injected[p] - impact[p],
                    node,
                    k == 1 && node.forced_default,
                )
            })
            .collect();
        let step = PathStep { pd: pd_base, assets_base };
        let action = action_at(k, &step);

        for p in 0..na {
            let node = net.node(active[p]);
            injected[p] += action.delta_j[active[p] - 1];
            let eff_w = node.assets + injected[p] - impact[p];
            let eff_e = node.equity + injected[p] - impact[p];
            let pd = path_pd(eff_w, eff_e, node, k == 1 && node.forced_default);
            // The externality scales with what is left of the balance
            // sheet; a node projected below zero assets contributes only
            // its lost government stake.
            let loss = node.alpha * eff_w.max(0.0)
                + (node.gov_investment + injected[p]) * node.lgd;
            entries[(p, k - 1)] =
                pd * loss * gamma.powi(k as i32 - 1) * survival[p];
            pd_hist[p].push(pd);
            survival[p] *= 1.0 - pd;
        }
        chosen.push(action);
    }

    (ZMatrix { node_ids: active, entries, actions: chosen.clone() }, chosen)
}

/// Product of (1 - PD_ir) for r = 1..=upto (0 offsets -> 1).
fn survival_through(pd_hist: &[f64], upto: usize) -> f64 {
    pd_hist[..upto].iter().map(|p| 1.0 - p).product()
}

/// PD on projected books. A node already marked for certain default
/// carries PD 1 at the first offset regardless of its books; projected
/// books at or below zero also mean certain default.
fn path_pd(eff_w: f64, eff_e: f64, node: &crate::network::BankNode, forced_now: bool) -> f64 {
    if forced_now || eff_w <= 0.0 || eff_e <= 0.0 {
        return 1.0;
    }
    merton_pd(eff_w, eff_e, node.mu, node.sigma, node.pd_floor)
        .expect("projected books keep E <= W")
}

/// Z under an explicit sequence; `actions.len()` sets the offset count m.
pub fn z_matrix(s: &MdpState, actions: &[InvestmentAction], cfg: &MdpConfig) -> ZMatrix {
    let (z, _) = z_recursion(s, actions.len(), cfg.gamma, |k, _| actions[k - 1].clone());
    z
}

/// Greedy sequence ā_1..ā_m for m = steps to maturity: at each offset in
/// turn, the action minimizing the total expected direct loss with the
/// chosen prefix fixed and the zero action filling the suffix. Candidates
/// per offset come from the risky profile of the projected path books.
/// Ties prefer less total injection, then enumeration order.
pub fn greedy_action_sequence(s: &MdpState, cfg: &MdpConfig) -> (Vec<InvestmentAction>, ZMatrix) {
    let m = s.time_to_maturity();
    assert!(m >= 1, "greedy_action_sequence: state is at the horizon");
    let n = s.network.len();
    let mut chosen: Vec<InvestmentAction> = Vec::with_capacity(m);

    for j in 1..=m {
        // Path state at offset j under (chosen, zero-filled suffix).
        let mut candidates: Vec<InvestmentAction> = Vec::new();
        {
            let (_, _) = z_recursion(s, j, cfg.gamma, |k, step| {
                if k < j {
                    chosen[k - 1].clone()
                } else {
                    let active = s.network.active_ids();
                    let risky: Vec<(usize, f64)> = (0..active.len())
                        .filter(|&p| step.pd[p] > cfg.risky_threshold)
                        .map(|p| (active[p], step.assets_base[p]))
                        .collect();
                    candidates = actions_from_profile(n, &risky, cfg);
                    InvestmentAction::zero(n)
                }
            });
        }

        let mut best: Option<(f64, InvestmentAction)> = None;
        for cand in candidates {
            let mut seq: Vec<InvestmentAction> = Vec::with_capacity(m);
            seq.extend(chosen.iter().cloned());
            seq.push(cand.clone());
            seq.resize(m, InvestmentAction::zero(n));
            let tl = z_matrix(s, &seq, cfg).total_loss();
            let better = match &best {
                None => true,
                Some((bt, ba)) => {
                    tl < *bt || (tl == *bt && cand.total() < ba.total())
                }
            };
            if better {
                best = Some((tl, cand));
            }
        }
        chosen.push(best.expect("candidate set always contains the zero action").1);
    }

    let z = z_matrix(s, &chosen, cfg);
    (chosen, z)
}
