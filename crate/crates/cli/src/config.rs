//! Experiment configuration: the TOML schema with flag overrides, network
//! sources (builtin kite, network files, the EBA table plus
//! reconstruction), scenario transforms and the config hash stamped into
//! every output file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bailout_core::fvi::SolverConfig;
use bailout_core::mdp::{MdpConfig, TargetingMode};
use bailout_core::network::{calibrate_sigma, BankNode, FinancialNetwork};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eba::{eba_network, load_eba};
use crate::ipf::reconstruct_exposures;
use crate::kk::build_kk_network;
use crate::{CliError, Result};

/// Stress applied to the initial balance sheets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    #[default]
    Baseline,
    /// Losses eat half the capital: E halves, W drops by the same amount,
    /// liabilities and the calibrated σ stay put, so every PD rises.
    HalfEquity,
}

impl FromStr for Scenario {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Scenario::Baseline),
            "half-equity" => Ok(Scenario::HalfEquity),
            other => Err(CliError::Config(format!(
                "scenario '{other}' is not one of baseline, half-equity"
            ))),
        }
    }
}

/// Options for rebuilding the exposure matrix from the aggregate table.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct Reconstruction {
    /// Balance-sheet table, relative to the config file.
    pub table: Option<PathBuf>,
    /// Interbank margin as a fraction of total assets.
    pub interbank_fraction: f64,
    /// Fraction of off-diagonal entries kept before balancing.
    pub target_density: f64,
    /// Homogeneous latent default correlation.
    pub rho: f64,
}

impl Default for Reconstruction {
    fn default() -> Self {
        Self { table: None, interbank_fraction: 0.25, target_density: 1.0, rho: 0.5 }
    }
}

/// Overrides over the decision-process defaults; absent fields keep them.
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MdpPatch {
    pub horizon: Option<usize>,
    pub gamma: Option<f64>,
    pub levels_bp: Option<Vec<u32>>,
    pub targeting: Option<TargetingMode>,
    pub risky_threshold: Option<f64>,
    pub samples: Option<usize>,
}

impl MdpPatch {
    fn resolve(&self, seed: u64) -> MdpConfig {
        let mut cfg = MdpConfig { seed, ..MdpConfig::default() };
        if let Some(v) = self.horizon {
            cfg.horizon = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = &self.levels_bp {
            cfg.levels_bp = v.clone();
        }
        if let Some(v) = self.targeting {
            cfg.targeting = v;
        }
        if let Some(v) = self.risky_threshold {
            cfg.risky_threshold = v;
        }
        if let Some(v) = self.samples {
            cfg.samples = v;
        }
        cfg
    }
}

/// Overrides over the network-size-dependent solver defaults.
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SolverPatch {
    pub bellman_samples: Option<usize>,
    pub multi_sets: Option<usize>,
    pub max_multi: Option<usize>,
    pub action_variants: Option<usize>,
    pub lambda_grid: Option<Vec<f64>>,
    pub folds: Option<usize>,
}

impl SolverPatch {
    fn resolve(&self, n: usize, seed: u64) -> SolverConfig {
        let mut cfg = SolverConfig { seed, ..SolverConfig::defaults_for(n) };
        if let Some(v) = self.bellman_samples {
            cfg.bellman_samples = v;
        }
        if let Some(v) = self.multi_sets {
            cfg.multi_sets = v;
        }
        if let Some(v) = self.max_multi {
            cfg.max_multi = v;
        }
        if let Some(v) = self.action_variants {
            cfg.action_variants = v;
        }
        if let Some(v) = &self.lambda_grid {
            cfg.lambda_grid = v.clone();
        }
        if let Some(v) = self.folds {
            cfg.folds = v;
        }
        cfg
    }
}

/// One experiment: a network source, the decision-process and solver
/// settings, the α sweep and the output location.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// "builtin:kk", "builtin:kk-full", "eba-table" or a network file
    /// path relative to the config file.
    pub network: String,
    #[serde(default)]
    pub reconstruction: Reconstruction,
    #[serde(default)]
    pub mdp: MdpPatch,
    #[serde(default)]
    pub solver: SolverPatch,
    /// Taxpayer-loss fractions to analyse, each in (0,1).
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub scenario: Scenario,
    /// Preset government stakes J_i(0), keyed by node id.
    #[serde(default)]
    pub presets: BTreeMap<String, f64>,
    /// Output directory, relative to the working directory.
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(skip)]
    base_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub network: Option<String>,
    pub scenario: Option<Scenario>,
    pub samples: Option<usize>,
}

/// A config turned into runnable pieces: the initial network with the
/// scenario and presets applied, validated MDP and solver settings, and
/// the hash identifying this configuration in output headers.
#[derive(Clone, Debug)]
pub struct ResolvedExperiment {
    pub cfg: ExperimentConfig,
    pub network: FinancialNetwork,
    pub mdp: MdpConfig,
    pub solver: SolverConfig,
    pub hash: String,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = toml::from_str(&body)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(cfg)
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(seed) = ov.seed {
            self.seed = seed;
        }
        if let Some(out) = &ov.out {
            self.out = out.clone();
        }
        if let Some(network) = &ov.network {
            self.network = network.clone();
        }
        if let Some(scenario) = ov.scenario {
            self.scenario = scenario;
        }
        if let Some(samples) = ov.samples {
            self.mdp.samples = Some(samples);
            self.solver.bellman_samples = Some(samples);
        }
    }

    /// Hash of everything that shapes the numbers. The output directory
    /// is excluded: where results land must not change what they hold.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.base_dir = PathBuf::new();
        let canonical = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut hex = String::with_capacity(16);
        for byte in &digest[..8] {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }

    pub fn resolve(&self) -> Result<ResolvedExperiment> {
        if self.alphas.is_empty() {
            return Err(CliError::Config("alphas must be nonempty".into()));
        }
        for &a in &self.alphas {
            if !(a > 0.0 && a < 1.0) {
                return Err(CliError::Config(format!("alpha {a} outside (0,1)")));
            }
        }

        let network = self.build_network()?;
        let network = apply_scenario(&network, self.scenario)?;
        let network = apply_presets(&network, &self.presets)?;

        let mdp = self.mdp.resolve(self.seed);
        mdp.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let solver = self.solver.resolve(network.len(), self.seed);
        solver.validate().map_err(|e| CliError::Config(e.to_string()))?;

        Ok(ResolvedExperiment {
            cfg: self.clone(),
            network,
            mdp,
            solver,
            hash: self.hash(),
        })
    }

    fn build_network(&self) -> Result<FinancialNetwork> {
        match self.network.as_str() {
            "builtin:kk" => Ok(build_kk_network(false)),
            "builtin:kk-full" => Ok(build_kk_network(true)),
            "eba-table" => {
                let table = self.reconstruction.table.as_ref().ok_or_else(|| {
                    CliError::Config("network 'eba-table' needs reconstruction.table".into())
                })?;
                let records = load_eba(self.base_dir.join(table))?;
                let exposure = reconstruct_exposures(
                    &records,
                    self.reconstruction.interbank_fraction,
                    self.reconstruction.target_density,
                )?;
                eba_network(&records, exposure, self.reconstruction.rho)
            }
            path => load_network_file(&self.base_dir.join(path)),
        }
    }
}

/// Applies the configured stress to the initial books.
pub fn apply_scenario(net: &FinancialNetwork, scenario: Scenario) -> Result<FinancialNetwork> {
    match scenario {
        Scenario::Baseline => Ok(net.clone()),
        Scenario::HalfEquity => {
            let nodes = net
                .nodes()
                .iter()
                .cloned()
                .map(|mut node| {
                    if node.active() {
                        node.assets -= node.equity / 2.0;
                        node.equity /= 2.0;
                    }
                    node
                })
                .collect();
            Ok(FinancialNetwork::new(nodes, net.exposure().clone(), net.correlation().clone())?)
        }
    }
}

fn apply_presets(
    net: &FinancialNetwork,
    presets: &BTreeMap<String, f64>,
) -> Result<FinancialNetwork> {
    if presets.is_empty() {
        return Ok(net.clone());
    }
    let mut nodes: Vec<BankNode> = net.nodes().to_vec();
    for (key, &stake) in presets {
        let id: usize = key
            .parse()
            .map_err(|_| CliError::Config(format!("preset key '{key}' is not a node id")))?;
        if id == 0 || id > nodes.len() {
            return Err(CliError::Config(format!("preset node {id} outside 1..={}", nodes.len())));
        }
        if stake < 0.0 {
            return Err(CliError::Config(format!("preset stake {stake} for node {id} is negative")));
        }
        nodes[id - 1].gov_investment = stake;
    }
    Ok(FinancialNetwork::new(nodes, net.exposure().clone(), net.correlation().clone())?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    nodes: Vec<NodeSpec>,
    exposures: ExposureSpec,
    correlation: CorrelationSpec,
}

/// BankNode fields minus σ, which is calibrated from `pd0`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeSpec {
    id: usize,
    label: Option<String>,
    assets: f64,
    equity: f64,
    pd0: f64,
    #[serde(default)]
    mu: f64,
    #[serde(default = "one")]
    lgd: f64,
    #[serde(default)]
    alpha: f64,
    #[serde(default)]
    gov_investment: f64,
    #[serde(default = "default_floor")]
    pd_floor: f64,
    #[serde(default)]
    defaulted: bool,
    #[serde(default)]
    forced_default: bool,
}

fn one() -> f64 {
    1.0
}

fn default_floor() -> f64 {
    0.00021
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExposureSpec {
    matrix: Option<Vec<Vec<f64>>>,
    edges: Option<Vec<EdgeSpec>>,
}

/// `w` is the exposure of `from` to the default of `to` (1-based ids).
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeSpec {
    from: usize,
    to: usize,
    w: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CorrelationSpec {
    uniform: Option<f64>,
    matrix: Option<Vec<Vec<f64>>>,
}

fn dense(n: usize, rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(CliError::Config(format!("{what} must be a {n}x{n} matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Parses the network file format: `[[nodes]]` entries, `[exposures]` as
/// a dense `matrix` or an `edges` list, and `[correlation]` as a
/// `uniform` scalar or a dense `matrix`.
pub fn load_network_file(path: &Path) -> Result<FinancialNetwork> {
    let body = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let file: NetworkFile = toml::from_str(&body)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let n = file.nodes.len();
    if n == 0 {
        return Err(CliError::Config(format!("{}: no nodes", path.display())));
    }

    let mut nodes = Vec::with_capacity(n);
    for spec in file.nodes {
        let sigma = match calibrate_sigma(spec.assets, spec.equity, spec.mu, spec.pd0) {
            Ok(s) => s,
            // A dead node's books may be beyond calibration; any positive
            // σ is inert there.
            Err(_) if spec.defaulted || spec.forced_default => 1.0,
            Err(e) => return Err(CliError::Config(format!("node {}: {e}", spec.id))),
        };
        nodes.push(BankNode {
            id: spec.id,
            label: spec.label.unwrap_or_else(|| spec.id.to_string()),
            assets: spec.assets,
            equity: spec.equity,
            mu: spec.mu,
            sigma,
            lgd: spec.lgd,
            alpha: spec.alpha,
            gov_investment: spec.gov_investment,
            pd_floor: spec.pd_floor,
            defaulted: spec.defaulted,
            forced_default: spec.forced_default,
        });
    }

    let exposure = match (&file.exposures.matrix, &file.exposures.edges) {
        (Some(rows), None) => dense(n, rows, "exposures.matrix")?,
        (None, Some(edges)) => {
            let mut x = DMatrix::zeros(n, n);
            for e in edges {
                if e.from == 0 || e.from > n || e.to == 0 || e.to > n || e.from == e.to {
                    return Err(CliError::Config(format!(
                        "edge {} -> {} outside the {n}-node network",
                        e.from, e.to
                    )));
                }
                if x[(e.from - 1, e.to - 1)] != 0.0 {
                    return Err(CliError::Config(format!("duplicate edge {} -> {}", e.from, e.to)));
                }
                x[(e.from - 1, e.to - 1)] = e.w;
            }
            x
        }
        _ => {
            return Err(CliError::Config(
                "exposures needs exactly one of 'matrix' or 'edges'".into(),
            ))
        }
    };

    let correlation = match (&file.correlation.uniform, &file.correlation.matrix) {
        (Some(rho), None) => {
            let mut c = DMatrix::from_element(n, n, *rho);
            c.fill_diagonal(1.0);
            c
        }
        (None, Some(rows)) => dense(n, rows, "correlation.matrix")?,
        _ => {
            return Err(CliError::Config(
                "correlation needs exactly one of 'uniform' or 'matrix'".into(),
            ))
        }
    };

    Ok(FinancialNetwork::new(nodes, exposure, correlation)?)
}
