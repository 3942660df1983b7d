//! Exact finite-horizon dynamic programming over enumerated states.
//!
//! Only feasible on tiny networks: every reachable state is enumerated
//! breadth-first, transition probabilities are exact rectangle values, and
//! the Bellman recursion is folded backward from the horizon. Q splits
//! into the closed-form expected one-step reward plus the probability-
//! weighted continuation, so the reward part carries no quadrature error
//! at all and the terminal step is exact.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mdp::{
    enumerate_actions, expected_one_step_reward, transition_prob, InvestmentAction, MdpConfig,
    MdpState,
};
use crate::network::{apply_impacts, apply_investment};

/// Hard cap on active nodes (the rectangle quadrature dimension).
pub const MAX_ORACLE_NODES: usize = 3;
/// Hard cap on the horizon (state count grows geometrically with it).
pub const MAX_ORACLE_HORIZON: usize = 5;
/// Quadrature tolerance for the continuation weights.
const ORACLE_TOL: f64 = 1e-13;

type StateKey = Vec<i64>;

/// One enumerated transition: successor key plus its exact probability.
struct Outgoing {
    next: StateKey,
    prob: f64,
}

/// The solved tables: V* for every reachable state, Q* for every
/// reachable non-terminal state.
pub struct OracleSolution {
    values: HashMap<StateKey, f64>,
    q_tables: HashMap<StateKey, Vec<(InvestmentAction, f64)>>,
    /// Number of distinct states reached from s0, terminal ones included.
    pub reachable_states: usize,
}

impl OracleSolution {
    pub fn value(&self, s: &MdpState) -> Option<f64> {
        self.values.get(&s.canonical_key()).copied()
    }

    /// Q* per action at `s`, in action enumeration order.
    pub fn q_table(&self, s: &MdpState) -> Option<&[(InvestmentAction, f64)]> {
        self.q_tables.get(&s.canonical_key()).map(Vec::as_slice)
    }

    /// Argmax action at `s`: largest Q, ties to the smaller total
    /// injection, then to enumeration order.
    pub fn best_action(&self, s: &MdpState) -> Option<&InvestmentAction> {
        let table = self.q_tables.get(&s.canonical_key())?;
        let mut best = 0;
        for i in 1..table.len() {
            let (ref aa, qa) = table[i];
            let (ref ab, qb) = table[best];
            if qa > qb || (qa == qb && aa.total() < ab.total()) {
                best = i;
            }
        }
        Some(&table[best].0)
    }

    /// Writes the tables as tab-separated text: one `V` line per state
    /// and one `Q` line per (state, action), keyed by the quantized state
    /// key joined with `|`. Lines are sorted, so the dump is diff-able.
    pub fn dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut lines = Vec::new();
        for (key, v) in &self.values {
            lines.push(format!("V\t{}\t\t{v:.17e}", join_key(key)));
        }
        for (key, table) in &self.q_tables {
            for (a, q) in table {
                lines.push(format!("Q\t{}\t{}\t{q:.17e}", join_key(key), a.label));
            }
        }
        lines.sort();
        let mut body = String::from("kind\tstate_key\taction\tvalue\n");
        for l in lines {
            let _ = writeln!(body, "{l}");
        }
        fs::write(path.as_ref(), body)
            .map_err(|e| Error::Serialization(format!("{}: {e}", path.as_ref().display())))
    }
}

fn join_key(key: &[i64]) -> String {
    key.iter().map(i64::to_string).collect::<Vec<_>>().join("|")
}

/// Successors of `s` under `a`: one per default subset of the active
/// nodes, with exact probabilities. Zero-probability subsets are dropped.
fn expand(s: &MdpState, a: &InvestmentAction) -> Result<Vec<(MdpState, f64)>> {
    let invested = apply_investment(&s.network, &a.delta_j)?;
    let active = invested.active_ids();
    let mut out = Vec::with_capacity(1 << active.len());
    for pattern in 0..(1u32 << active.len()) {
        let defaults: BTreeSet<usize> = active
            .iter()
            .enumerate()
            .filter(|&(pos, _)| pattern >> pos & 1 == 1)
            .map(|(_, &id)| id)
            .collect();
        let mut defaulted = s.defaulted.clone();
        defaulted.extend(defaults.iter().copied());
        let s_next = MdpState {
            network: apply_impacts(&invested, &defaults),
            defaulted,
            t: s.t + 1,
            horizon: s.horizon,
        };
        let p = transition_prob(s, a, &s_next, ORACLE_TOL)?;
        if p > 0.0 {
            out.push((s_next, p));
        }
    }
    let total: f64 = out.iter().map(|(_, p)| p).sum();
    assert!(
        (total - 1.0).abs() < 1e-6,
        "transition probabilities sum to {total} at t = {}",
        s.t
    );
    Ok(out)
}

/// Solves the decision problem exactly by backward induction over every
/// state reachable from `s0`.
///
/// Q(s, a) = E[R | s, a] + γ·Σ_D P(D)·V*(s'_D), with the reward term in
/// closed form and the continuation weighted by exact rectangle
/// probabilities; V* = max_a Q with the standard tie-break.
pub fn solve_exact(s0: &MdpState, cfg: &MdpConfig) -> Result<OracleSolution> {
    cfg.validate()?;
    let active0 = s0.network.active_ids().len();
    if active0 > MAX_ORACLE_NODES {
        return Err(Error::OracleTooLarge { got: active0, max: MAX_ORACLE_NODES });
    }
    if s0.horizon > MAX_ORACLE_HORIZON {
        return Err(Error::InvalidParameter(format!(
            "oracle horizon cap is {MAX_ORACLE_HORIZON}, got {}",
            s0.horizon
        )));
    }
    if s0.t >= s0.horizon {
        return Err(Error::EpisodeOver { t: s0.t, horizon: s0.horizon });
    }

    // Forward sweep: enumerate reachable states level by level, recording
    // each state's action-indexed transition fan.
    let mut levels: Vec<Vec<MdpState>> = vec![vec![s0.clone()]];
    let mut seen: HashSet<StateKey> = HashSet::from([s0.canonical_key()]);
    let mut fans: HashMap<StateKey, Vec<(InvestmentAction, f64, Vec<Outgoing>)>> = HashMap::new();

    for _ in s0.t..s0.horizon {
        let current = levels.last().expect("levels never empty");
        let mut next_level = Vec::new();
        for s in current {
            let mut fan = Vec::new();
            for a in enumerate_actions(s, cfg) {
                let reward = expected_one_step_reward(s, &a)?;
                let outgoing = expand(s, &a)?
                    .into_iter()
                    .map(|(s_next, prob)| {
                        let key = s_next.canonical_key();
                        if seen.insert(key.clone()) {
                            next_level.push(s_next);
                        }
                        Outgoing { next: key, prob }
                    })
                    .collect();
                fan.push((a, reward, outgoing));
            }
            fans.insert(s.canonical_key(), fan);
        }
        levels.push(next_level);
    }

    // Backward sweep: V = 0 at the horizon, then fold Q and max.
    let mut values: HashMap<StateKey, f64> = HashMap::new();
    let mut q_tables = HashMap::new();
    for s in levels.last().expect("terminal level exists") {
        values.insert(s.canonical_key(), 0.0);
    }
    for level in levels[..levels.len() - 1].iter().rev() {
        for s in level {
            let key = s.canonical_key();
            let fan = fans.remove(&key).expect("every non-terminal state has a fan");
            let mut table = Vec::with_capacity(fan.len());
            let mut best: Option<(f64, f64)> = None; // (q, total injection)
            for (a, reward, outgoing) in fan {
                let cont: f64 =
                    outgoing.iter().map(|o| o.prob * values[&o.next]).sum();
                let q = reward + cfg.gamma * cont;
                let better = match best {
                    None => true,
                    Some((bq, bt)) => q > bq || (q == bq && a.total() < bt),
                };
                if better {
                    best = Some((q, a.total()));
                }
                table.push((a, q));
            }
            values.insert(key.clone(), best.expect("nonempty action set").0);
            q_tables.insert(key, table);
        }
    }

    Ok(OracleSolution { values, q_tables, reachable_states: seen.len() })
}
