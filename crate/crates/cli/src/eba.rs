//! Loader for the 35-institution GSII balance-sheet table and the network
//! builder that sits on top of a reconstructed exposure matrix.

use std::path::Path;

use bailout_core::network::{calibrate_sigma, BankNode, FinancialNetwork};
use nalgebra::DMatrix;

use crate::{CliError, Result};

/// Loss given default on government stakes, the usual credit-risk rule of
/// thumb for senior unsecured exposure.
pub const EBA_LGD: f64 = 0.6;
/// Same calibration floor as the kite benchmark.
pub const EBA_PD_FLOOR: f64 = 0.00021;

/// One institution: balance sheet in billions plus its initial one-step
/// default probability.
#[derive(Clone, Debug, PartialEq)]
pub struct EbaRecord {
    pub symbol: String,
    pub name: String,
    pub assets: f64,
    pub equity: f64,
    pub pd0: f64,
}

/// Parses the delimited table: a `symbol,name,assets,equity,pd0` header
/// followed by one row per institution. Blank lines and `#` comments are
/// skipped; every malformed row is reported with its line number and
/// symbol.
pub fn load_eba(path: impl AsRef<Path>) -> Result<Vec<EbaRecord>> {
    let path = path.as_ref();
    let body = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (idx, line) in body.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line != "symbol,name,assets,equity,pd0" {
                return Err(CliError::Config(format!(
                    "{}:{}: expected header 'symbol,name,assets,equity,pd0', got '{line}'",
                    path.display(),
                    idx + 1
                )));
            }
            saw_header = true;
            continue;
        }
        rows.push(parse_row(path, idx + 1, line)?);
    }
    if rows.is_empty() {
        return Err(CliError::Config(format!("{}: no data rows", path.display())));
    }
    Ok(rows)
}

fn parse_row(path: &Path, line_no: usize, line: &str) -> Result<EbaRecord> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    let fail = |msg: String| {
        CliError::Config(format!(
            "{}:{line_no} ({}): {msg}",
            path.display(),
            fields.first().copied().unwrap_or("?")
        ))
    };
    if fields.len() != 5 {
        return Err(fail(format!("expected 5 fields, got {}", fields.len())));
    }
    let num = |what: &str, raw: &str| {
        raw.parse::<f64>().map_err(|_| fail(format!("{what} '{raw}' is not a number")))
    };
    let record = EbaRecord {
        symbol: fields[0].to_string(),
        name: fields[1].to_string(),
        assets: num("assets", fields[2])?,
        equity: num("equity", fields[3])?,
        pd0: num("pd0", fields[4])?,
    };
    if !(record.equity > 0.0 && record.assets > record.equity) {
        return Err(fail(format!("requires W > E > 0, got W={}, E={}", record.assets, record.equity)));
    }
    if !(record.pd0 > 0.0 && record.pd0 < 1.0) {
        return Err(fail(format!("pd0 {} outside (0,1)", record.pd0)));
    }
    Ok(record)
}

/// Assembles the GSII network: σ calibrated per institution from its
/// table row, LGD = 0.6, no initial government stakes, homogeneous latent
/// correlation `rho`, exposures as given (typically the IPF
/// reconstruction).
pub fn eba_network(
    records: &[EbaRecord],
    exposure: DMatrix<f64>,
    rho: f64,
) -> Result<FinancialNetwork> {
    let n = records.len();
    let mut nodes = Vec::with_capacity(n);
    for (i, r) in records.iter().enumerate() {
        let sigma = calibrate_sigma(r.assets, r.equity, 0.0, r.pd0)
            .map_err(|e| CliError::Config(format!("{}: {e}", r.symbol)))?;
        nodes.push(BankNode {
            id: i + 1,
            label: r.symbol.clone(),
            assets: r.assets,
            equity: r.equity,
            mu: 0.0,
            sigma,
            lgd: EBA_LGD,
            alpha: 0.0,
            gov_investment: 0.0,
            pd_floor: EBA_PD_FLOOR,
            defaulted: false,
            forced_default: false,
        });
    }
    let mut correlation = DMatrix::from_element(n, n, rho);
    correlation.fill_diagonal(1.0);
    Ok(FinancialNetwork::new(nodes, exposure, correlation)?)
}
