//! Fitted value iteration: linear value approximation on deterministic
//! loss features, fit backward in time by cross-validated ridge
//! regression, and the Monte Carlo Bellman machinery that produces the
//! regression targets and the final Q estimates.

mod features;
mod portfolio;
mod ridge;
mod solver;

pub use features::{greedy_action_sequence, z_matrix, ZMatrix};
pub use portfolio::{representative_portfolio, sample_multi_set};
pub use ridge::{ridge_cv, RidgeFit};
pub use solver::{
    bellman_value, convenience, exact_terminal_value, fit_policy, optimal_action, q_star,
    value_approx, ActionValue, PolicyFit, SolverConfig,
};
