//! Experiment drivers: policy fits per α, Q and Convenience tables, the
//! critical-α bisection and deterministic CSV emission.
//!
//! Every output file starts with `# config_hash:` and `# seed:` comment
//! lines; identical config and seed reproduce every byte. Q columns are
//! always paired with their Monte Carlo standard error.

use std::fs;
use std::path::{Path, PathBuf};

use bailout_core::fvi::{convenience, fit_policy, optimal_action, q_star, PolicyFit};
use bailout_core::mdp::MdpState;
use bailout_core::network::{BankNode, FinancialNetwork};
use bailout_core::oracle::solve_exact;
use bailout_core::rng::{Namespace, StreamFactory};
use log::info;

use crate::config::ResolvedExperiment;
use crate::{CliError, Result};

/// Sign-confidence gate, in standard errors.
const CONFIDENCE_SE: f64 = 3.0;
/// Sample doublings tried before a probe is declared indeterminate (8×).
const MAX_DOUBLINGS: u32 = 3;
const BISECT_MAX_PROBES: usize = 12;
/// Bisection stops once hi/lo falls under this.
const BISECT_STOP_RATIO: f64 = 1.15;

/// Evaluation stream index blocks; fits use their own namespaces.
const SWEEP_BASE: u64 = 1 << 40;
const ORACLE_BASE: u64 = 1 << 44;

fn stream_index(alpha_idx: usize, t: usize, purpose: u64) -> u64 {
    ((alpha_idx as u64) << 20) | ((t as u64) << 4) | purpose
}

/// Shortest decimal form that parses back to the same f64.
fn fmt_num(x: f64) -> String {
    if x == 0.0 {
        "0".into()
    } else {
        format!("{x}")
    }
}

fn ensure_out(exp: &ResolvedExperiment) -> Result<PathBuf> {
    let dir = exp.cfg.out.clone();
    fs::create_dir_all(&dir).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_csv(
    dir: &Path,
    name: &str,
    exp: &ResolvedExperiment,
    columns: &str,
    rows: &[String],
) -> Result<PathBuf> {
    let mut body = format!("# config_hash: {}\n# seed: {}\n{columns}\n", exp.hash, exp.cfg.seed);
    for row in rows {
        body.push_str(row);
        body.push('\n');
    }
    let path = dir.join(name);
    fs::write(&path, body).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
    Ok(path)
}

/// The experiment network with every node's taxpayer-loss fraction set to
/// the sweep value.
pub fn with_alpha(net: &FinancialNetwork, alpha: f64) -> Result<FinancialNetwork> {
    let nodes: Vec<BankNode> = net
        .nodes()
        .iter()
        .cloned()
        .map(|mut node| {
            node.alpha = alpha;
            node
        })
        .collect();
    Ok(FinancialNetwork::new(nodes, net.exposure().clone(), net.correlation().clone())?)
}

/// The initial state moved to time `t` with books untouched, the same
/// construction the portfolio uses for mid-episode rows.
pub fn moved_to(s0: &MdpState, t: usize) -> MdpState {
    let mut s = s0.clone();
    s.t = t;
    s
}

/// Fits the backward policy for the experiment network at `alpha`.
pub fn fit_at(exp: &ResolvedExperiment, alpha: f64) -> Result<(MdpState, PolicyFit)> {
    let net = with_alpha(&exp.network, alpha)?;
    let s0 = MdpState::initial(net, exp.mdp.horizon);
    let fit = fit_policy(&s0, &exp.mdp, &exp.solver)?;
    Ok((s0, fit))
}

/// Fits and saves one policy file per α, plus a fit diagnostic table.
pub fn run_fit(exp: &ResolvedExperiment) -> Result<Vec<PathBuf>> {
    let dir = ensure_out(exp)?;
    let mut rows = Vec::new();
    let mut files = Vec::new();
    for &alpha in &exp.cfg.alphas {
        info!("fitting policy at alpha = {alpha}");
        let (_, fit) = fit_at(exp, alpha)?;
        let path = dir.join(format!("policy_alpha_{}.json", fmt_num(alpha)));
        fit.save(&path)?;
        for t in 0..fit.lambda.len() {
            rows.push(format!(
                "{},{t},{},{},{}",
                fmt_num(alpha),
                fmt_num(fit.lambda[t]),
                fmt_num(fit.cv_r2[t]),
                fit.portfolio_rows[t]
            ));
        }
        files.push(path);
    }
    files.push(write_csv(&dir, "fit_summary.csv", exp, "alpha,t,lambda,cv_r2,rows", &rows)?);
    Ok(files)
}

struct EvaluateTables {
    q_values: Vec<String>,
    q_vs_time: Vec<String>,
    convenience: Vec<String>,
    summary: Vec<String>,
}

fn evaluate_tables(exp: &ResolvedExperiment) -> Result<EvaluateTables> {
    let factory = StreamFactory::new(exp.cfg.seed);
    let m = exp.mdp.horizon;
    let mut tables = EvaluateTables {
        q_values: Vec::new(),
        q_vs_time: Vec::new(),
        convenience: Vec::new(),
        summary: Vec::new(),
    };

    for (ai, &alpha) in exp.cfg.alphas.iter().enumerate() {
        info!("evaluating alpha = {alpha}");
        let (s0, fit) = fit_at(exp, alpha)?;
        for t in 0..m {
            let s = moved_to(&s0, t);
            let mut rng = factory.stream(Namespace::Evaluate, stream_index(ai, t, 0));
            let (best, table) = optimal_action(&s, &fit, &exp.mdp, &mut rng)?;
            let mut rng = factory.stream(Namespace::Evaluate, stream_index(ai, t, 1));
            let (conv, conv_se) = convenience(&s, &fit, &exp.mdp, &mut rng)?;

            let best_row =
                table.iter().find(|v| v.action == best).expect("best action is in its own table");
            for v in &table {
                if t == 0 {
                    tables.q_values.push(format!(
                        "{},{},{},{}",
                        fmt_num(alpha),
                        v.action.label,
                        fmt_num(v.q),
                        fmt_num(v.std_error)
                    ));
                }
                tables.q_vs_time.push(format!(
                    "{},{t},{},{},{},{}",
                    fmt_num(alpha),
                    m - t,
                    v.action.label,
                    fmt_num(v.q),
                    fmt_num(v.std_error)
                ));
            }
            tables.convenience.push(format!(
                "{},{t},{},{},{}",
                fmt_num(alpha),
                m - t,
                fmt_num(conv),
                fmt_num(conv_se)
            ));
            tables.summary.push(format!(
                "{},{t},{},{},{},{},{},{}",
                fmt_num(alpha),
                m - t,
                best.label,
                fmt_num(best_row.q),
                fmt_num(best_row.std_error),
                fmt_num(conv),
                fmt_num(conv_se)
            ));
        }
    }
    Ok(tables)
}

/// Q tables at t = 0, Q and Convenience against time to the end, and the
/// best-action summary.
pub fn run_evaluate(exp: &ResolvedExperiment) -> Result<Vec<PathBuf>> {
    let dir = ensure_out(exp)?;
    let tables = evaluate_tables(exp)?;
    Ok(vec![
        write_csv(&dir, "q_values.csv", exp, "alpha,action,q,std_error", &tables.q_values)?,
        write_csv(
            &dir,
            "q_vs_time.csv",
            exp,
            "alpha,t,time_to_end,action,q,std_error",
            &tables.q_vs_time,
        )?,
        write_csv(
            &dir,
            "convenience.csv",
            exp,
            "alpha,t,time_to_end,convenience,std_error",
            &tables.convenience,
        )?,
        write_csv(
            &dir,
            "summary.csv",
            exp,
            "alpha,t,time_to_end,best_action,q,std_error,convenience,convenience_se",
            &tables.summary,
        )?,
    ])
}

/// One sign measurement of the Convenience at t = 0.
#[derive(Clone, Debug)]
pub struct Probe {
    pub alpha: f64,
    pub convenience: f64,
    pub std_error: f64,
    pub samples: usize,
    /// The sign cleared the 3-standard-error gate.
    pub confident: bool,
}

/// The located sign-change interval. Without a confident bracket the
/// bounds fall back to the scanned range (0 and 1 when a side is open).
#[derive(Clone, Copy, Debug)]
pub struct AlphaC {
    pub lo: f64,
    pub hi: f64,
    pub bracketed: bool,
}

fn confident_convenience(
    exp: &ResolvedExperiment,
    alpha: f64,
    probe_idx: u64,
    factory: &StreamFactory,
) -> Result<Probe> {
    let (s0, fit) = fit_at(exp, alpha)?;
    let mut cfg = exp.mdp.clone();
    loop {
        for doubling in 0..=MAX_DOUBLINGS {
            cfg.samples = exp.mdp.samples << doubling;
            let mut rng = factory
                .stream(Namespace::Evaluate, SWEEP_BASE | (probe_idx << 8) | doubling as u64);
            let (c, se) = convenience(&s0, &fit, &cfg, &mut rng)?;
            let confident = c.abs() >= CONFIDENCE_SE * se;
            if confident || doubling == MAX_DOUBLINGS {
                info!(
                    "alpha = {alpha}: convenience {c:.6} (se {se:.2e}, {} samples)",
                    cfg.samples
                );
                return Ok(Probe {
                    alpha,
                    convenience: c,
                    std_error: se,
                    samples: cfg.samples,
                    confident,
                });
            }
        }
    }
}

/// Scans the configured α values for a confident sign change of the
/// Convenience at t = 0, then shrinks the change interval by geometric
/// bisection. Indeterminate probes stop the shrinking; the interval is
/// reported as it stands.
pub fn estimate_alpha_c(exp: &ResolvedExperiment) -> Result<(Vec<Probe>, AlphaC)> {
    let factory = StreamFactory::new(exp.cfg.seed);
    let mut alphas = exp.cfg.alphas.clone();
    alphas.sort_by(|a, b| a.partial_cmp(b).expect("alphas validated finite"));
    alphas.dedup();

    let mut probes = Vec::new();
    let mut probe_idx: u64 = 0;
    for &alpha in &alphas {
        probes.push(confident_convenience(exp, alpha, probe_idx, &factory)?);
        probe_idx += 1;
    }

    let mut lo = None;
    let mut hi = None;
    for p in &probes {
        if p.confident && p.convenience < 0.0 {
            lo = Some(p.alpha);
        }
        if p.confident && p.convenience > 0.0 && hi.is_none() {
            hi = Some(p.alpha);
        }
    }
    let (mut lo, mut hi, bracketed) = match (lo, hi) {
        (Some(l), Some(h)) if l < h => (l, h, true),
        // A positive sign below a negative one contradicts the monotone
        // premise; report the scanned range without shrinking it.
        (Some(l), Some(h)) => (h, l, false),
        (Some(l), None) => (l, 1.0, false),
        (None, Some(h)) => (0.0, h, false),
        (None, None) => (0.0, 1.0, false),
    };

    if bracketed {
        for _ in 0..BISECT_MAX_PROBES {
            if hi / lo <= BISECT_STOP_RATIO {
                break;
            }
            let mid = (lo * hi).sqrt();
            let p = confident_convenience(exp, mid, probe_idx, &factory)?;
            probe_idx += 1;
            let positive = p.confident && p.convenience > 0.0;
            let negative = p.confident && p.convenience < 0.0;
            probes.push(p);
            if positive {
                hi = mid;
            } else if negative {
                lo = mid;
            } else {
                break;
            }
        }
    }

    Ok((probes, AlphaC { lo, hi, bracketed }))
}

fn write_sweep_files(
    exp: &ResolvedExperiment,
    dir: &Path,
    probes: &[Probe],
    ac: &AlphaC,
) -> Result<Vec<PathBuf>> {
    let rows: Vec<String> = probes
        .iter()
        .map(|p| {
            format!(
                "{},{},{},{},{}",
                fmt_num(p.alpha),
                fmt_num(p.convenience),
                fmt_num(p.std_error),
                p.samples,
                p.confident
            )
        })
        .collect();
    let interval =
        vec![format!("{},{},{}", fmt_num(ac.lo), fmt_num(ac.hi), ac.bracketed)];
    Ok(vec![
        write_csv(
            dir,
            "alpha_sweep.csv",
            exp,
            "alpha,convenience,std_error,samples,confident",
            &rows,
        )?,
        write_csv(dir, "alpha_c.csv", exp, "alpha_c_low,alpha_c_high,bracketed", &interval)?,
    ])
}

/// The critical-α search on its own.
pub fn run_sweep(exp: &ResolvedExperiment) -> Result<Vec<PathBuf>> {
    let dir = ensure_out(exp)?;
    let (probes, ac) = estimate_alpha_c(exp)?;
    write_sweep_files(exp, &dir, &probes, &ac)
}

/// The full driver: evaluation tables plus the critical-α search, with
/// the located interval echoed into the summary file.
pub fn run_experiment(exp: &ResolvedExperiment) -> Result<Vec<PathBuf>> {
    let mut files = run_evaluate(exp)?;
    let dir = ensure_out(exp)?;
    let (probes, ac) = estimate_alpha_c(exp)?;
    files.extend(write_sweep_files(exp, &dir, &probes, &ac)?);

    let summary = dir.join("summary.csv");
    let mut body = fs::read_to_string(&summary)
        .map_err(|e| CliError::Failed(format!("{}: {e}", summary.display())))?;
    body.push_str(&format!(
        "# alpha_c_low: {}\n# alpha_c_high: {}\n",
        fmt_num(ac.lo),
        fmt_num(ac.hi)
    ));
    fs::write(&summary, body)
        .map_err(|e| CliError::Failed(format!("{}: {e}", summary.display())))?;
    Ok(files)
}

/// Compares the fitted policy against the exact solver on the configured
/// network (small networks only) and fails when any action value falls
/// outside `max(3·SE, 2% |V*| + 1e-6)`.
pub fn run_oracle_check(exp: &ResolvedExperiment) -> Result<Vec<PathBuf>> {
    let dir = ensure_out(exp)?;
    let factory = StreamFactory::new(exp.cfg.seed);
    let mut rows = Vec::new();
    let mut breaches = 0usize;

    for (ai, &alpha) in exp.cfg.alphas.iter().enumerate() {
        let net = with_alpha(&exp.network, alpha)?;
        let s0 = MdpState::initial(net, exp.mdp.horizon);
        let exact = solve_exact(&s0, &exp.mdp)?;
        let fit = fit_policy(&s0, &exp.mdp, &exp.solver)?;
        let v_star = exact.value(&s0).expect("initial state is solved");
        let table = exact.q_table(&s0).expect("initial state has a Q table");

        for (qi, (action, q_exact)) in table.iter().enumerate() {
            let mut rng =
                factory.stream(Namespace::Evaluate, ORACLE_BASE | ((ai as u64) << 16) | qi as u64);
            let value = q_star(&s0, action, &fit, &exp.mdp, &mut rng)?;
            let tol = (CONFIDENCE_SE * value.std_error).max(0.02 * v_star.abs() + 1e-6);
            let diff = (value.q - q_exact).abs();
            let within = diff <= tol;
            if !within {
                breaches += 1;
            }
            rows.push(format!(
                "{},{},{},{},{},{},{within}",
                fmt_num(alpha),
                action.label,
                fmt_num(value.q),
                fmt_num(value.std_error),
                fmt_num(*q_exact),
                fmt_num(diff)
            ));
        }
    }

    let file = write_csv(
        &dir,
        "oracle_check.csv",
        exp,
        "alpha,action,q_fvi,std_error,q_exact,abs_diff,within_tolerance",
        &rows,
    )?;
    if breaches > 0 {
        return Err(CliError::Failed(format!(
            "oracle check: {breaches} action value(s) outside tolerance; see {}",
            file.display()
        )));
    }
    Ok(vec![file])
}
