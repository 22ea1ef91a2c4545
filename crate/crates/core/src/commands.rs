//! The four scenario commands behind the `dmdkit` binary.
//!
//! Each command writes its artifacts into an output directory and returns
//! an [`Outcome`] carrying the process exit code. Errors map to exit codes
//! through [`exit_code`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::domain::SystemState;
use crate::dynamics::evolve;
use crate::ensemble::{self, PARTITION_RTOL};
use crate::error::{DmdError, Result};
use crate::free_energy::{interaction_quadrature_error, Estimator, FreeEnergyReport, Functional, LogDomainTerm, Objective};
use crate::io::{fmt_f64, state_table, trace_table, trajectory_table, write_json, CsvTable};
use crate::minimizer::{minimize, MinimizeStatus};
use crate::oracle::{run_oracle, OracleResult};
use crate::scenario::Scenario;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_ORACLE_TOO_LARGE: u8 = 3;

/// Exit code for an error that aborted a command.
pub fn exit_code(err: &DmdError) -> u8 {
    match err {
        DmdError::OracleTooLarge(_) => EXIT_ORACLE_TOO_LARGE,
        DmdError::Config(_)
        | DmdError::InvalidDomain(_)
        | DmdError::DomainTooSmall { .. }
        | DmdError::InvalidParameter(_)
        | DmdError::UnsupportedEstimator(_)
        | DmdError::Shape { .. } => EXIT_CONFIG,
        DmdError::AtTime { source, .. } => exit_code(source),
        _ => EXIT_FAILED,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub exit_code: u8,
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

struct Writer<'a> {
    dir: &'a Path,
    scenario: &'a Scenario,
    artifacts: Vec<PathBuf>,
}

impl<'a> Writer<'a> {
    fn new(dir: &'a Path, scenario: &'a Scenario) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir,
            scenario,
            artifacts: Vec::new(),
        })
    }

    fn csv(&mut self, name: &str, table: &CsvTable) -> Result<()> {
        if self.scenario.outputs.csv {
            let p = self.dir.join(name);
            table.write(&p)?;
            self.artifacts.push(p);
        }
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        if self.scenario.outputs.json {
            let p = self.dir.join(name);
            write_json(&p, value)?;
            self.artifacts.push(p);
        }
        Ok(())
    }

    fn finish(self, exit_code: u8, summary: String) -> Outcome {
        Outcome {
            exit_code,
            artifacts: self.artifacts,
            summary,
        }
    }
}

#[derive(Serialize)]
struct MinimizeReport<'a> {
    #[serde(flatten)]
    report: &'a FreeEnergyReport,
    status: MinimizeStatus,
    iterations: usize,
    quadrature_error: f64,
}

/// Minimizes over `(X, k)`; writes `state.csv`, `trace.csv`, `report.json`.
pub fn cmd_minimize(scenario: &Scenario, out: &Path) -> Result<Outcome> {
    let state = scenario.build_state()?;
    let obj = scenario.objective();
    let (min_state, trace) = minimize(&state, &obj, &scenario.minimize)?;
    let report = obj.evaluate(&min_state)?;
    let qerr = interaction_quadrature_error(&min_state, &obj)?;
    let mut w = Writer::new(out, scenario)?;
    w.csv("state.csv", &state_table(&min_state))?;
    w.csv("trace.csv", &trace_table(&trace))?;
    w.json(
        "report.json",
        &MinimizeReport {
            report: &report,
            status: trace.status,
            iterations: trace.rows.len() - 1,
            quadrature_error: qerr,
        },
    )?;
    let summary = format!(
        "{:?} after {} iterations, {} = {}",
        trace.status,
        trace.rows.len() - 1,
        report.functional.name(),
        fmt_f64(report.value)
    );
    Ok(w.finish(EXIT_OK, summary))
}

#[derive(Serialize)]
struct Checkpoint<'a> {
    t: f64,
    #[serde(flatten)]
    report: &'a FreeEnergyReport,
}

#[derive(Serialize)]
struct EvolveSummary {
    rows: usize,
    max_step_drift: f64,
    clamped_steps: usize,
    stability_warnings: usize,
    checkpoints: usize,
}

/// Runs the dynamics; writes `trajectory.csv`, `final_state.csv`,
/// `checkpoints.json` and `evolve.json`.
pub fn cmd_evolve(scenario: &Scenario, out: &Path) -> Result<Outcome> {
    let cfg = scenario
        .dynamics
        .as_ref()
        .ok_or_else(|| DmdError::Config("evolve needs a [dynamics] table".into()))?;
    let state = scenario.build_state()?;
    let obj = scenario.objective();
    let traj = evolve(&state, cfg, &obj, &scenario.minimize)?;
    let mut w = Writer::new(out, scenario)?;
    w.csv("trajectory.csv", &trajectory_table(&traj))?;
    w.csv("final_state.csv", &state_table(&traj.final_state))?;
    let checkpoints: Vec<Checkpoint> = traj
        .checkpoints
        .iter()
        .map(|(t, r)| Checkpoint { t: *t, report: r })
        .collect();
    w.json("checkpoints.json", &checkpoints)?;
    let summary = EvolveSummary {
        rows: traj.rows.len(),
        max_step_drift: traj.max_step_drift,
        clamped_steps: traj.clamped_steps,
        stability_warnings: traj.stability_warnings,
        checkpoints: checkpoints.len(),
    };
    w.json("evolve.json", &summary)?;
    let text = format!(
        "{} rows to t = {}, max per-step drift of sum c = {:e}",
        summary.rows,
        fmt_f64(cfg.n_steps() as f64 * cfg.dt),
        summary.max_step_drift
    );
    Ok(w.finish(EXIT_OK, text))
}

/// One line of the validation report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Measured discrepancy (or `NaN` when the check could not run).
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    fn new(name: &str, value: f64, threshold: f64, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed: value <= threshold,
            value,
            threshold,
            detail,
        }
    }

    fn failed(name: &str, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed: false,
            value: f64::NAN,
            threshold: f64::NAN,
            detail,
        }
    }
}

#[derive(Serialize)]
struct ValidationReport<'a> {
    passed: bool,
    checks: &'a [Check],
    oracle: Option<&'a OracleResult>,
    f_hat: Option<f64>,
}

/// Central-difference check of the analytic `(X, k)` gradient, one-sided
/// second order where the box or `k >= 0` is in the way.
pub fn gradient_check(state: &SystemState, obj: &Objective) -> Result<(f64, f64)> {
    let report = obj.evaluate(state)?;
    let n = state.n_sites();
    let d = state.dim();
    let l = state.domain().half_width();
    let mut theta = state.means().as_slice().to_vec();
    theta.extend(state.k_values());
    let analytic: Vec<f64> = report.grad_x.iter().chain(&report.grad_k).copied().collect();
    let value_at = |t: &[f64]| -> Result<f64> {
        Ok(obj.evaluate(&state.with_params(&t[..n * d], &t[n * d..])?)?.value)
    };
    let (mut worst_x, mut worst_k) = (0.0f64, 0.0f64);
    for p in 0..theta.len() {
        let is_k = p >= n * d;
        let (lo, hi) = if is_k { (0.0, state.k_max()) } else { (-l, l) };
        let h = 1e-5 * theta[p].abs().max(1.0);
        let shifted = |delta: f64| -> Result<f64> {
            let mut t = theta.clone();
            t[p] += delta;
            value_at(&t)
        };
        let fd = if theta[p] - h >= lo && theta[p] + h <= hi {
            (shifted(h)? - shifted(-h)?) / (2.0 * h)
        } else if theta[p] + 2.0 * h <= hi {
            (-3.0 * report.value + 4.0 * shifted(h)? - shifted(2.0 * h)?) / (2.0 * h)
        } else {
            (3.0 * report.value - 4.0 * shifted(-h)? + shifted(-2.0 * h)?) / (2.0 * h)
        };
        let rel = (analytic[p] - fd).abs() / analytic[p].abs().max(fd.abs()).max(1.0);
        if is_k {
            worst_k = worst_k.max(rel);
        } else {
            worst_x = worst_x.max(rel);
        }
    }
    Ok((worst_x, worst_k))
}

fn record<T>(checks: &mut Vec<Check>, name: &str, r: Result<T>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            checks.push(Check::failed(name, e.to_string()));
            None
        }
    }
}

/// Runs the oracle suite on the scenario's state; writes
/// `validation.json` and `checks.csv`. Exits 1 when any check fails.
pub fn cmd_validate(scenario: &Scenario, out: &Path) -> Result<Outcome> {
    let opts = scenario
        .oracle
        .as_ref()
        .ok_or_else(|| DmdError::Config("validate needs an [oracle] table".into()))?;
    let state = scenario.build_state()?;
    opts.check_size(&state)?;
    let obj = scenario.objective();
    let beta = state.beta();
    let mut checks = Vec::new();

    let (from_mu, from_c) = ensemble::partition_hat_forms(&state);
    checks.push(Check::new(
        "dual_partition",
        (from_mu - from_c).abs() / from_c.abs().max(1e-300),
        PARTITION_RTOL,
        format!("log Z-hat from mu-hat {} vs from c {}", fmt_f64(from_mu), fmt_f64(from_c)),
    ));
    let occ = (0..state.n_sites())
        .map(|i| (ensemble::occupancy_expectation(&state, i) - state.site(i).c).abs())
        .fold(0.0, f64::max);
    checks.push(Check::new("occupancy", occ, 1e-12, "max |E[a_i] - c_i|".into()));

    let oracle = record(&mut checks, "oracle", run_oracle(&state, &scenario.potential, opts));
    let report = record(&mut checks, "f_hat", obj.evaluate(&state));
    let est_err = record(&mut checks, "f_hat", interaction_quadrature_error(&state, &obj));

    if let Some(o) = &oracle {
        checks.push(Check::new(
            "relative_entropy_nonnegative",
            -o.relative_entropy,
            o.quadrature_error_estimate + 1e-12,
            format!("R = {}", fmt_f64(o.relative_entropy)),
        ));
        checks.push(Check::new(
            "rn_normalization",
            (o.rn_normalization - 1.0).abs(),
            o.rn_normalization_error + 1e-10,
            format!("E[d nu-hat / d nu] = {}", fmt_f64(o.rn_normalization)),
        ));
        checks.push(Check::new(
            "mu_residual",
            o.mu_residual,
            opts.residual_tol,
            "max |E[a_i](mu) - c_i|".into(),
        ));
        if state.mean_field() {
            let dev = o
                .mu_true
                .iter()
                .zip(state.sites())
                .map(|(m, s)| (m - (s.c.ln() - (1.0 - s.c).ln()) / beta).abs())
                .fold(0.0, f64::max);
            checks.push(Check::new("mean_field_mu", dev, 1e-8, "oracle mu vs logit(c)/beta".into()));
        }
    }
    if let (Some(o), Some(r), Some(e)) = (&oracle, &report, est_err) {
        // F-hat uses the log|D| convention of the scenario; the identity
        // needs the bounded-domain functional as is.
        let comparable = scenario.log_domain == LogDomainTerm::Include && r.functional != Functional::F2011;
        if comparable {
            let scale = 1e-6 * r.value.abs().max(o.f_exact.abs()).max(1.0);
            let tol = scale + o.quadrature_error_estimate / beta + e + 2.0 * r.mc_std_error;
            checks.push(Check::new(
                "gibbs_bogoliubov",
                o.f_exact - r.value,
                tol,
                format!("F-hat {} vs F {}", fmt_f64(r.value), fmt_f64(o.f_exact)),
            ));
            checks.push(Check::new(
                "entropy_identity",
                (o.relative_entropy / beta - (r.value - o.f_exact)).abs(),
                tol,
                "|R / beta - (F-hat - F)|".into(),
            ));
        }
    }
    if matches!(obj.estimator, Estimator::PairQuadrature { .. }) {
        if let Some((gx, gk)) = record(&mut checks, "gradient", gradient_check(&state, &obj)) {
            checks.push(Check::new("gradient_x", gx, 1e-6, "relative, central differences".into()));
            checks.push(Check::new("gradient_k", gk, 1e-6, "relative, central differences".into()));
        }
    }

    let passed = checks.iter().all(|c| c.passed);
    let mut w = Writer::new(out, scenario)?;
    let header = ["check", "passed", "value", "threshold"].map(String::from).to_vec();
    let mut table = CsvTable::new("checks", header);
    for c in &checks {
        table.rows.push(vec![
            c.name.clone(),
            c.passed.to_string(),
            fmt_f64(c.value),
            fmt_f64(c.threshold),
        ]);
    }
    w.csv("checks.csv", &table)?;
    w.json(
        "validation.json",
        &ValidationReport {
            passed,
            checks: &checks,
            oracle: oracle.as_ref(),
            f_hat: report.as_ref().map(|r| r.value),
        },
    )?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let summary = if passed {
        format!("all {} checks passed", checks.len())
    } else {
        format!("failed: {}", failed.join(", "))
    };
    Ok(w.finish(if passed { EXIT_OK } else { EXIT_FAILED }, summary))
}

/// One row of the large-domain comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub half_width: f64,
    pub f_hat: f64,
    pub f_2011: f64,
    pub logd_term: f64,
    pub residual: f64,
    pub mean_pos: Vec<f64>,
    pub weighted_mean_pos: Vec<f64>,
    pub c_times_x: Vec<f64>,
}

/// `F-hat`, `F_2011` and mean positions over a sweep of half-widths.
pub fn compare_rows(scenario: &Scenario, state: &SystemState, sweep: &[f64]) -> Result<Vec<CompareRow>> {
    if !state.mean_field() {
        return Err(DmdError::Config("compare needs a mean_field system".into()));
    }
    if sweep.is_empty() {
        return Err(DmdError::Config("compare needs at least one half-width".into()));
    }
    let hat = match scenario.compare.functional.unwrap_or(scenario.functional()) {
        Functional::F2011 => Functional::natural_for(state.model(), state.variant()),
        f => f,
    };
    let est = scenario.estimator();
    sweep
        .iter()
        .map(|&l| {
            let s = state.with_domain(state.domain().with_half_width(l)?)?;
            let r_hat = Objective::new(&scenario.potential, hat, est).evaluate(&s)?;
            let r_2011 = Objective::new(&scenario.potential, Functional::F2011, est).evaluate(&s)?;
            let mut row = CompareRow {
                half_width: l,
                f_hat: r_hat.value,
                f_2011: r_2011.value,
                logd_term: r_hat.logd_term,
                residual: r_hat.value - r_2011.value - r_hat.logd_term,
                mean_pos: Vec::new(),
                weighted_mean_pos: Vec::new(),
                c_times_x: Vec::new(),
            };
            for i in 0..s.n_sites() {
                let m = ensemble::site_moments(&s, i);
                row.mean_pos.extend(&m.mean_pos);
                row.weighted_mean_pos.extend(&m.weighted_mean_pos);
                row.c_times_x.extend(s.site(i).x.iter().map(|x| s.site(i).c * x));
            }
            Ok(row)
        })
        .collect()
}

/// Writes `compare.csv` for the sweep (the scenario's own when empty).
pub fn cmd_compare(scenario: &Scenario, out: &Path, sweep: &[f64]) -> Result<Outcome> {
    let state = scenario.build_state()?;
    let sweep = if sweep.is_empty() { &scenario.compare.sweep[..] } else { sweep };
    let rows = compare_rows(scenario, &state, sweep)?;
    let n = state.n_sites();
    let d = state.dim();
    let mut header: Vec<String> = ["half_width", "f_hat", "f_2011", "logd_term", "residual"]
        .map(String::from)
        .to_vec();
    for prefix in ["mean_pos_", "weighted_mean_pos_", "c_x_"] {
        for i in 0..n {
            header.extend((0..d).map(|a| format!("{prefix}{i}_{a}")));
        }
    }
    let mut table = CsvTable::new("compare", header).with_meta("n_sites", n).with_meta("dim", d);
    for r in &rows {
        let mut v = vec![r.half_width, r.f_hat, r.f_2011, r.logd_term, r.residual];
        v.extend(&r.mean_pos);
        v.extend(&r.weighted_mean_pos);
        v.extend(&r.c_times_x);
        table.push_floats(&v);
    }
    let mut w = Writer::new(out, scenario)?;
    w.csv("compare.csv", &table)?;
    let last = rows.last().expect("sweep is non-empty");
    let summary = format!("{} rows, final residual {:e}", rows.len(), last.residual);
    Ok(w.finish(EXIT_OK, summary))
}
