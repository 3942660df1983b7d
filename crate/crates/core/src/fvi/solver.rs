//! Backward fitting of the linear value approximation and the Monte Carlo
//! evaluation layer shared by Bellman backups, Q estimation and the
//! Convenience statistic.
//!
//! Time structure: V at the horizon is zero; one step before the horizon
//! the value is the exact one-step maximum (no coefficients involved); at
//! every earlier step the continuation is the fitted linear form at t+1.
//! Coefficients are therefore fitted for t = M-2 down to 0 only.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::greedy_action_sequence;
use super::portfolio::representative_portfolio;
use super::ridge::ridge_cv;
use crate::copula::{cholesky_factor, default_thresholds};
use crate::error::{Error, Result};
use crate::mdp::{
    enumerate_actions, expected_one_step_reward, InvestmentAction, MdpConfig, MdpState,
};
use crate::network::{apply_impacts, apply_investment};
use crate::rng::{Namespace, StreamFactory};

/// Schema version of serialized [`PolicyFit`] files.
pub const POLICY_FIT_VERSION: u32 = 1;

/// Solver knobs: sampling effort, portfolio composition and the ridge
/// penalty search.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Monte Carlo draws per Bellman backup.
    pub bellman_samples: usize,
    /// Random multi-default portfolio states per time step.
    pub multi_sets: usize,
    /// Largest forced-default set size in the portfolio.
    pub max_multi: usize,
    /// Action-perturbed portfolio states per time step; each is emitted
    /// both as-is and with one forced default on top.
    pub action_variants: usize,
    /// Ridge penalty grid, ascending.
    pub lambda_grid: Vec<f64>,
    /// Cross-validation folds; the fitting scheme fixes five.
    pub folds: usize,
    /// Seed for the portfolio and Bellman sampling streams.
    pub seed: u64,
}

/// Log-spaced penalties 1e-4 .. 1e2, two per decade.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..13).map(|i| 10f64.powf(-4.0 + 0.5 * i as f64)).collect()
}

impl SolverConfig {
    /// Defaults scaled to a network of `n` nodes. The portfolio sizes keep
    /// the regression row count ahead of the feature count (n columns per
    /// remaining step): with fewer rows than columns the backward fitting
    /// loop can feed its own extrapolation errors and diverge.
    pub fn defaults_for(n: usize) -> Self {
        Self {
            bellman_samples: 20_000,
            multi_sets: 8 * n,
            max_multi: 4,
            action_variants: 3 * n,
            lambda_grid: default_lambda_grid(),
            folds: 5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bellman_samples < 1000 {
            return Err(Error::InvalidParameter(format!(
                "bellman_samples = {} below the minimum of 1000",
                self.bellman_samples
            )));
        }
        if self.folds != 5 {
            return Err(Error::InvalidParameter(format!(
                "folds = {}, the fitting scheme fixes 5",
                self.folds
            )));
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|&l| !(l > 0.0) || !l.is_finite())
        {
            return Err(Error::InvalidParameter(
                "lambda_grid must be nonempty with positive finite entries".into(),
            ));
        }
        Ok(())
    }
}

/// Fitted value coefficients for every decision step, plus the diagnostics
/// of how they were obtained.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyFit {
    pub version: u32,
    /// beta[t] is n_nodes x (M - t) for t = 0..=M-2; row = node id - 1,
    /// column = step offset - 1. Entries start at 1 and are replaced by
    /// the ridge solution; negative values are possible and kept.
    pub beta: Vec<DMatrix<f64>>,
    /// Chosen ridge penalty per time step.
    pub lambda: Vec<f64>,
    /// Pooled out-of-fold uncentered R-squared per time step.
    pub cv_r2: Vec<f64>,
    /// Regression rows per time step after deduplication.
    pub portfolio_rows: Vec<usize>,
    pub seed: u64,
    pub mdp: MdpConfig,
    pub solver: SolverConfig,
}

impl PolicyFit {
    /// The horizon M the fit was produced for.
    pub fn horizon(&self) -> usize {
        self.beta.len() + 1
    }

    /// Coefficients governing the successors of `s`, or None when the
    /// successors' values are exact (one step before the horizon or at
    /// it). Errors when the fit does not match the state's shape.
    fn beta_for_next(&self, s: &MdpState) -> Result<Option<&DMatrix<f64>>> {
        if self.horizon() != s.horizon || self.beta[0].nrows() != s.network.len() {
            return Err(Error::DimensionMismatch(format!(
                "policy fit for horizon {} / {} nodes used on horizon {} / {} nodes",
                self.horizon(),
                self.beta[0].nrows(),
                s.horizon,
                s.network.len()
            )));
        }
        Ok(if s.t + 2 <= self.horizon() - 1 { Some(&self.beta[s.t + 1]) } else { None })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        fs::write(path.as_ref(), body)
            .map_err(|e| Error::Serialization(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let body = fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Serialization(format!("{}: {e}", path.as_ref().display())))?;
        let fit: PolicyFit =
            serde_json::from_str(&body).map_err(|e| Error::Serialization(e.to_string()))?;
        if fit.version != POLICY_FIT_VERSION {
            return Err(Error::Serialization(format!(
                "policy file version {} unsupported (expected {POLICY_FIT_VERSION})",
                fit.version
            )));
        }
        let steps = fit.beta.len();
        if steps == 0
            || fit.mdp.horizon != steps + 1
            || fit.lambda.len() != steps
            || fit.cv_r2.len() != steps
            || fit.portfolio_rows.len() != steps
        {
            return Err(Error::Serialization("policy file is internally inconsistent".into()));
        }
        Ok(fit)
    }
}

/// One action's Monte Carlo Q estimate at a state.
#[derive(Clone, Debug)]
pub struct ActionValue {
    pub action: InvestmentAction,
    /// Q = exact one-step reward + discounted mean continuation.
    pub q: f64,
    /// Monte Carlo standard error; exactly zero when no sampling was
    /// involved.
    pub std_error: f64,
    /// The exact one-step reward component.
    pub reward: f64,
    /// Per-draw undiscounted continuation values, empty when the
    /// continuation is deterministic. Shared draw indices across actions
    /// evaluated together, so paired differences are meaningful.
    pub draws: Vec<f64>,
}

/// How successor values are computed.
enum Continuation<'a> {
    /// Past the horizon, or a zero discount: no continuation at all.
    Zero,
    /// Successors sit one step before the horizon: exact one-step max.
    ExactTerminal,
    /// The fitted linear form at t+1.
    Approx(&'a DMatrix<f64>),
}

fn continuation_for<'a>(
    s: &MdpState,
    cfg: &MdpConfig,
    beta_next: Option<&'a DMatrix<f64>>,
) -> Result<Continuation<'a>> {
    if cfg.gamma == 0.0 || s.t + 1 == s.horizon {
        return Ok(Continuation::Zero);
    }
    if s.t + 2 == s.horizon {
        return Ok(Continuation::ExactTerminal);
    }
    beta_next.map(Continuation::Approx).ok_or_else(|| {
        Error::InvalidParameter(format!(
            "successors of t = {} need fitted coefficients for t = {}",
            s.t,
            s.t + 1
        ))
    })
}

/// V* one step before the horizon: the best achievable expected one-step
/// reward; the continuation past the horizon is zero, so this is exact.
pub fn exact_terminal_value(s: &MdpState, cfg: &MdpConfig) -> Result<f64> {
    assert_eq!(s.time_to_maturity(), 1, "exact_terminal_value: state not at M-1");
    let mut best: Option<(f64, f64)> = None; // (value, total injection)
    for a in enumerate_actions(s, cfg) {
        let v = expected_one_step_reward(s, &a)?;
        let better = match best {
            None => true,
            Some((bv, bt)) => v > bv || (v == bv && a.total() < bt),
        };
        if better {
            best = Some((v, a.total()));
        }
    }
    Ok(best.expect("action set always contains the zero action").0)
}

/// The fitted value: minus the coefficient-weighted sum of the greedy
/// feature matrix. Zero when every node has defaulted.
pub fn value_approx(s: &MdpState, beta: &DMatrix<f64>, cfg: &MdpConfig) -> Result<f64> {
    let m = s.time_to_maturity();
    let n = s.network.len();
    if beta.nrows() != n || beta.ncols() != m {
        return Err(Error::DimensionMismatch(format!(
            "value_approx: beta is {}x{} for {} nodes and {} offsets",
            beta.nrows(),
            beta.ncols(),
            n,
            m
        )));
    }
    if s.network.active_ids().is_empty() {
        return Ok(0.0);
    }
    let (_, z) = greedy_action_sequence(s, cfg);
    let mut v = 0.0;
    for (p, &id) in z.node_ids.iter().enumerate() {
        for k in 0..m {
            v -= beta[(id - 1, k)] * z.entries[(p, k)];
        }
    }
    Ok(v)
}

/// Value of one successor state under the chosen continuation rule.
fn successor_value(s_next: &MdpState, cont: &Continuation, cfg: &MdpConfig) -> Result<f64> {
    match cont {
        Continuation::Zero => Ok(0.0),
        Continuation::ExactTerminal => exact_terminal_value(s_next, cfg),
        Continuation::Approx(beta) => value_approx(s_next, beta, cfg),
    }
}

/// Q estimates for every action at `s` from one shared set of latent
/// draws. Sharing makes differences between actions low-variance and the
/// per-action results independent of evaluation order.
fn evaluate_actions<R: Rng + ?Sized>(
    s: &MdpState,
    actions: &[InvestmentAction],
    beta_next: Option<&DMatrix<f64>>,
    cfg: &MdpConfig,
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<ActionValue>> {
    if s.t >= s.horizon {
        return Err(Error::EpisodeOver { t: s.t, horizon: s.horizon });
    }
    if actions.is_empty() {
        return Err(Error::InvalidParameter("evaluate_actions: empty action set".into()));
    }
    let cont = continuation_for(s, cfg, beta_next)?;
    let active = s.network.active_ids();

    // No active nodes: the transition is deterministic, no draws needed.
    if active.is_empty() {
        return actions
            .iter()
            .map(|a| {
                let reward = expected_one_step_reward(s, a)?;
                let invested = apply_investment(&s.network, &a.delta_j)?;
                let s_next = MdpState {
                    network: invested,
                    defaulted: s.defaulted.clone(),
                    t: s.t + 1,
                    horizon: s.horizon,
                };
                let v = successor_value(&s_next, &cont, cfg)?;
                Ok(ActionValue {
                    action: a.clone(),
                    q: reward + cfg.gamma * v,
                    std_error: 0.0,
                    reward,
                    draws: vec![],
                })
            })
            .collect();
    }

    if matches!(cont, Continuation::Zero) {
        return actions
            .iter()
            .map(|a| {
                let reward = expected_one_step_reward(s, a)?;
                Ok(ActionValue {
                    action: a.clone(),
                    q: reward,
                    std_error: 0.0,
                    reward,
                    draws: vec![],
                })
            })
            .collect();
    }

    if n_samples == 0 {
        return Err(Error::InvalidParameter("evaluate_actions: zero samples".into()));
    }
    assert!(active.len() <= 64, "default patterns are tracked in a 64-bit mask");

    // Common random numbers: the active set and its correlation are the
    // same under every action (investment cannot default a node), so one
    // latent draw set serves all of them.
    let factor = cholesky_factor(&s.network.correlation_sub(&active), active.clone())?;
    let latent: Vec<Vec<f64>> = (0..n_samples).map(|_| factor.sample_latent(rng)).collect();

    let mut out = Vec::with_capacity(actions.len());
    for a in actions {
        let reward = expected_one_step_reward(s, a)?;
        let invested = apply_investment(&s.network, &a.delta_j)?;
        let pds: Vec<f64> = active.iter().map(|&id| invested.node(id).default_prob()).collect();
        let thresholds = default_thresholds(&pds)?;

        // Distinct default patterns are few; each successor is priced once.
        let mut masks = Vec::with_capacity(n_samples);
        for x in &latent {
            let mut mask = 0u64;
            for (pos, (&xi, &ti)) in x.iter().zip(&thresholds).enumerate() {
                if xi < ti {
                    mask |= 1u64 << pos;
                }
            }
            masks.push(mask);
        }
        let mut value_of: HashMap<u64, f64> = HashMap::new();
        for &mask in &masks {
            if value_of.contains_key(&mask) {
                continue;
            }
            let defaults: BTreeSet<usize> = active
                .iter()
                .enumerate()
                .filter(|&(pos, _)| mask >> pos & 1 == 1)
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
            value_of.insert(mask, successor_value(&s_next, &cont, cfg)?);
        }

        let draws: Vec<f64> = masks.iter().map(|m| value_of[m]).collect();
        let mean = draws.iter().sum::<f64>() / n_samples as f64;
        let var = if n_samples > 1 {
            draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n_samples - 1) as f64
        } else {
            0.0
        };
        out.push(ActionValue {
            action: a.clone(),
            q: reward + cfg.gamma * mean,
            std_error: cfg.gamma * (var / n_samples as f64).sqrt(),
            reward,
            draws,
        });
    }
    Ok(out)
}

/// Index of the best estimate: largest Q, ties to the smaller total
/// injection, then to the earlier position.
fn best_index(vals: &[ActionValue]) -> usize {
    let mut best = 0;
    for i in 1..vals.len() {
        let (v, b) = (&vals[i], &vals[best]);
        if v.q > b.q || (v.q == b.q && v.action.total() < b.action.total()) {
            best = i;
        }
    }
    best
}

/// One Bellman backup: the max and argmax over the state's action set,
/// with the continuation taken from `beta_next` (or computed exactly next
/// to the horizon).
pub fn bellman_value<R: Rng + ?Sized>(
    s: &MdpState,
    beta_next: Option<&DMatrix<f64>>,
    cfg: &MdpConfig,
    n_samples: usize,
    rng: &mut R,
) -> Result<(f64, InvestmentAction)> {
    let actions = enumerate_actions(s, cfg);
    let vals = evaluate_actions(s, &actions, beta_next, cfg, n_samples, rng)?;
    let i = best_index(&vals);
    Ok((vals[i].q, vals[i].action.clone()))
}

/// Fits the value coefficients backward from M-2 to 0.
///
/// Each step regresses Monte Carlo Bellman targets over a representative
/// portfolio on the negated greedy features, so the coefficients enter
/// the value positively. Rows of defaulted nodes stay zero-filled, which
/// keeps the design matrix rectangular with a fixed column order (node
/// id major, step offset minor). Deterministic for a fixed seed.
pub fn fit_policy(
    s0: &MdpState,
    mdp_cfg: &MdpConfig,
    solver_cfg: &SolverConfig,
) -> Result<PolicyFit> {
    mdp_cfg.validate()?;
    solver_cfg.validate()?;
    if s0.horizon < 2 {
        return Err(Error::InvalidParameter("fit_policy: horizon must be at least 2".into()));
    }
    if s0.t != 0 {
        return Err(Error::InvalidParameter("fit_policy: the base state must sit at t = 0".into()));
    }
    let n = s0.network.len();
    let m_total = s0.horizon;
    let factory = StreamFactory::new(solver_cfg.seed);

    let mut beta: Vec<DMatrix<f64>> =
        (0..=m_total - 2).map(|t| DMatrix::from_element(n, m_total - t, 1.0)).collect();
    let mut lambda = vec![0.0; m_total - 1];
    let mut cv_r2 = vec![0.0; m_total - 1];
    let mut portfolio_rows = vec![0usize; m_total - 1];

    for t in (0..=m_total - 2).rev() {
        let mut prng = factory.stream(Namespace::Portfolio, t as u64);
        let states = representative_portfolio(s0, t, mdp_cfg, solver_cfg, &mut prng);
        let m = m_total - t;
        let mut x = DMatrix::zeros(states.len(), n * m);
        let mut y = DVector::zeros(states.len());

        for (row, state) in states.iter().enumerate() {
            let beta_next = if t + 2 <= m_total - 1 { Some(&beta[t + 1]) } else { None };
            let mut brng =
                factory.stream(Namespace::Bellman, ((t as u64) << 32) | row as u64);
            let (target, _) =
                bellman_value(state, beta_next, mdp_cfg, solver_cfg.bellman_samples, &mut brng)?;
            y[row] = target;
            if state.network.active_ids().is_empty() {
                continue;
            }
            let (_, z) = greedy_action_sequence(state, mdp_cfg);
            for (p, &id) in z.node_ids.iter().enumerate() {
                for k in 0..m {
                    x[(row, (id - 1) * m + k)] = -z.entries[(p, k)];
                }
            }
        }

        // Shrinkage target is the all-ones coefficient vector, under which
        // the value equals minus the projected total loss. Fitting the
        // residual anchors the regression there, so heavy penalties (and
        // states off the portfolio support) degrade to that estimate
        // instead of drifting toward zero value or open-ended
        // extrapolation.
        let baseline = &x * DVector::from_element(n * m, 1.0);
        let fit = ridge_cv(&x, &(&y - baseline), &solver_cfg.lambda_grid, solver_cfg.folds)?;
        beta[t] = DMatrix::from_fn(n, m, |i, k| 1.0 + fit.coeffs[i * m + k]);
        lambda[t] = fit.lambda;
        cv_r2[t] = fit.cv_r2;
        portfolio_rows[t] = states.len();
    }

    Ok(PolicyFit {
        version: POLICY_FIT_VERSION,
        beta,
        lambda,
        cv_r2,
        portfolio_rows,
        seed: solver_cfg.seed,
        mdp: mdp_cfg.clone(),
        solver: solver_cfg.clone(),
    })
}

/// Q estimate of a single action under a fitted policy. Sample count
/// comes from `cfg.samples`; exact (zero error) at the last decision step.
pub fn q_star<R: Rng + ?Sized>(
    s: &MdpState,
    a: &InvestmentAction,
    fit: &PolicyFit,
    cfg: &MdpConfig,
    rng: &mut R,
) -> Result<ActionValue> {
    let beta_next = fit.beta_for_next(s)?;
    let mut vals =
        evaluate_actions(s, std::slice::from_ref(a), beta_next, cfg, cfg.samples, rng)?;
    Ok(vals.pop().expect("one action in, one estimate out"))
}

/// The argmax action and the full Q table (shared draws across actions).
pub fn optimal_action<R: Rng + ?Sized>(
    s: &MdpState,
    fit: &PolicyFit,
    cfg: &MdpConfig,
    rng: &mut R,
) -> Result<(InvestmentAction, Vec<ActionValue>)> {
    let actions = enumerate_actions(s, cfg);
    let vals = evaluate_actions(s, &actions, fit.beta_for_next(s)?, cfg, cfg.samples, rng)?;
    let i = best_index(&vals);
    Ok((vals[i].action.clone(), vals))
}

/// Convenience to intervene: the best nonzero action's Q minus the
/// do-nothing Q, with the standard error of the paired difference.
/// Defined as zero when no nonzero action exists.
pub fn convenience<R: Rng + ?Sized>(
    s: &MdpState,
    fit: &PolicyFit,
    cfg: &MdpConfig,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let actions = enumerate_actions(s, cfg);
    if actions.len() < 2 {
        return Ok((0.0, 0.0));
    }
    let vals = evaluate_actions(s, &actions, fit.beta_for_next(s)?, cfg, cfg.samples, rng)?;
    let zero_pos = vals
        .iter()
        .position(|v| v.action.is_zero())
        .expect("enumerated action sets always lead with the zero action");
    let nonzero: Vec<ActionValue> =
        vals.iter().filter(|v| !v.action.is_zero()).cloned().collect();
    let best = &nonzero[best_index(&nonzero)];
    let baseline = &vals[zero_pos];

    let diff = best.q - baseline.q;
    if best.draws.is_empty() {
        return Ok((diff, 0.0));
    }
    let n = best.draws.len();
    let deltas: Vec<f64> =
        best.draws.iter().zip(&baseline.draws).map(|(b, z)| b - z).collect();
    let mean = deltas.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Ok((diff, cfg.gamma * (var / n as f64).sqrt()))
}
