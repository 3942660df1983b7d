//! Contagion-network model of a banking system with government capital
//! injections, cast as a finite-horizon Markov decision process.
//!
//! The crate is organised around five layers:
//!
//! * [`network`] — balance-sheet dynamics: structural-model default
//!   probabilities, volatility calibration, default impacts, taxpayer
//!   losses and capital injections.
//! * [`copula`] — the Gaussian latent-variable dependence model used to
//!   draw correlated defaults and to evaluate joint default probabilities.
//! * [`mdp`] — the decision process itself: states, investment actions,
//!   one-step dynamics with rewards, exact transition probabilities on
//!   small networks and episode rollouts.
//! * [`fvi`] — the fitted-value-iteration solver: expected-loss features,
//!   backward ridge-regression fitting and Q-value / policy evaluation.
//! * [`oracle`] — exact finite-horizon dynamic programming over enumerated
//!   states, used to validate the fitted solver on small networks.

pub mod copula;
pub mod error;
pub mod fvi;
pub mod math;
pub mod mdp;
pub mod network;
pub mod oracle;
pub mod rng;

pub use error::{Error, Result};
pub use network::{BankNode, FinancialNetwork};
