//! Box-constrained minimization of a functional over `(X, k)` at fixed `c`.
//!
//! Scaled projected gradient descent. The trial point projects
//! `theta - alpha D g` onto `X in [-L, L]^d`, `k in [0, K_max]`; monotone
//! Armijo backtracking runs along the segment to it. `D` is 1 on positions
//! and `k^2` (clamped) on stiffnesses, which evens out the `1/k^2` curvature
//! of the entropy terms. `alpha` is the Barzilai-Borwein step in that metric.

use serde::{Deserialize, Serialize};

use crate::domain::{SystemState, DEFAULT_K_MAX};
use crate::error::{DmdError, Result};
use crate::free_energy::{FreeEnergyReport, Objective};

const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-20;
const MAX_STEP: f64 = 1e20;
const METRIC_MIN: f64 = 1e-4;
const METRIC_MAX: f64 = 1e8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinimizeOptions {
    pub max_iters: usize,
    /// Threshold on the infinity norm of the projected gradient.
    pub grad_tol: f64,
    pub step_init: f64,
    pub backtrack_factor: f64,
    pub k_max: f64,
    /// Stop when an accepted step lowers the value by at most this much.
    pub f_tol: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-8,
            step_init: 1.0,
            backtrack_factor: 0.5,
            k_max: DEFAULT_K_MAX,
            f_tol: 1e-15,
        }
    }
}

impl MinimizeOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DmdError::InvalidParameter(m.to_string()));
        if self.max_iters == 0 {
            return bad("max_iters must be positive");
        }
        if !(self.grad_tol > 0.0) || !(self.step_init > 0.0) || !(self.k_max > 0.0) {
            return bad("grad_tol, step_init and k_max must be positive");
        }
        if !(self.f_tol >= 0.0) {
            return bad("f_tol must be >= 0");
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return bad("backtrack_factor must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MinimizeStatus {
    Converged,
    MaxIters,
    Stagnated,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub value: f64,
    pub pg_norm: f64,
    /// Accepted step length; zero on the initial row.
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimizeTrace {
    pub rows: Vec<TraceRow>,
    pub status: MinimizeStatus,
}

impl MinimizeTrace {
    pub fn final_value(&self) -> f64 {
        self.rows.last().map(|r| r.value).unwrap_or(f64::NAN)
    }

    pub fn final_pg_norm(&self) -> f64 {
        self.rows.last().map(|r| r.pg_norm).unwrap_or(f64::NAN)
    }
}

struct Bounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Bounds {
    fn project(&self, theta: &mut [f64]) {
        for ((t, lo), hi) in theta.iter_mut().zip(&self.lo).zip(&self.hi) {
            *t = t.clamp(*lo, *hi);
        }
    }

    fn pg_norm(&self, theta: &[f64], g: &[f64]) -> f64 {
        theta
            .iter()
            .zip(g)
            .enumerate()
            .map(|(i, (t, gi))| (t - (t - gi).clamp(self.lo[i], self.hi[i])).abs())
            .fold(0.0, f64::max)
    }
}

fn pack(state: &SystemState) -> Vec<f64> {
    let mut theta = state.means().as_slice().to_vec();
    theta.extend(state.k_values());
    theta
}

fn unpack(state: &SystemState, theta: &[f64]) -> Result<SystemState> {
    let nd = state.n_sites() * state.dim();
    state.with_params(&theta[..nd], &theta[nd..])
}

fn gradient(r: &FreeEnergyReport) -> Vec<f64> {
    let mut g = r.grad_x.clone();
    g.extend_from_slice(&r.grad_k);
    g
}

fn evaluate(
    state: &SystemState,
    theta: &[f64],
    obj: &Objective,
    iteration: usize,
) -> Result<(SystemState, FreeEnergyReport)> {
    let failure = |message: String| DmdError::NumericalFailure {
        iteration,
        message,
        iterate: theta.to_vec(),
    };
    let next = unpack(state, theta)?;
    let report = match obj.evaluate(&next) {
        Ok(r) => r,
        Err(DmdError::NumericalFailure { message, .. }) => return Err(failure(message)),
        Err(e) => return Err(e),
    };
    if !report.value.is_finite() {
        return Err(failure(format!("functional value {}", report.value)));
    }
    if report.grad_x.iter().chain(&report.grad_k).any(|g| !g.is_finite()) {
        return Err(failure("non-finite gradient".into()));
    }
    Ok((next, report))
}

/// Minimizes `obj` over the mean positions and stiffnesses of `state`.
pub fn minimize(
    state: &SystemState,
    obj: &Objective,
    opts: &MinimizeOptions,
) -> Result<(SystemState, MinimizeTrace)> {
    opts.validate()?;
    obj.check(state)?;
    let n = state.n_sites();
    let d = state.dim();
    let l = state.domain().half_width();
    let k_cap = opts.k_max.min(state.k_max());
    let bounds = Bounds {
        lo: (0..n * d).map(|_| -l).chain((0..n).map(|_| 0.0)).collect(),
        hi: (0..n * d).map(|_| l).chain((0..n).map(|_| k_cap)).collect(),
    };

    let mut theta = pack(state);
    bounds.project(&mut theta);
    let (mut current, mut report) = evaluate(state, &theta, obj, 0)?;
    let mut g = gradient(&report);
    let mut pg = bounds.pg_norm(&theta, &g);
    let mut rows = vec![TraceRow {
        iteration: 0,
        value: report.value,
        pg_norm: pg,
        step: 0.0,
    }];
    let mut alpha = opts.step_init;
    let mut status = MinimizeStatus::MaxIters;

    let nd = n * d;
    let metric = |theta: &[f64]| -> Vec<f64> {
        (0..theta.len())
            .map(|i| if i < nd { 1.0 } else { (theta[i] * theta[i]).clamp(METRIC_MIN, METRIC_MAX) })
            .collect()
    };

    for iter in 1..=opts.max_iters {
        if pg <= opts.grad_tol {
            status = MinimizeStatus::Converged;
            break;
        }
        let m = metric(&theta);
        let mut target = theta.clone();
        for ((t, gi), mi) in target.iter_mut().zip(&g).zip(&m) {
            *t -= alpha * mi * gi;
        }
        bounds.project(&mut target);
        let dir: Vec<f64> = target.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let dir_dot: f64 = dir.iter().zip(&g).map(|(di, gi)| di * gi).sum();
        let mut lambda = 1.0;
        let accepted = loop {
            let mut trial: Vec<f64> = theta.iter().zip(&dir).map(|(t, di)| t + lambda * di).collect();
            bounds.project(&mut trial);
            if trial == theta || !(dir_dot < 0.0) || lambda * alpha < MIN_STEP {
                break None;
            }
            let (next, next_report) = evaluate(state, &trial, obj, iter)?;
            if next_report.value <= report.value + ARMIJO_C * lambda * dir_dot {
                break Some((trial, next, next_report, lambda * alpha));
            }
            lambda *= opts.backtrack_factor;
        };
        let Some((trial, next, next_report, step)) = accepted else {
            status = MinimizeStatus::Stagnated;
            break;
        };
        let g_new = gradient(&next_report);
        // BB1 in the metric: (s' D^-2 s) / (s' D^-1 y).
        let (mut ss, mut sy) = (0.0, 0.0);
        for i in 0..theta.len() {
            let s = (trial[i] - theta[i]) / m[i];
            ss += s * s;
            sy += s * (g_new[i] - g[i]);
        }
        alpha = if sy > 0.0 { ss / sy } else { 2.0 * alpha };
        alpha = alpha.clamp(MIN_STEP, MAX_STEP);

        let decrease = report.value - next_report.value;
        theta = trial;
        current = next;
        report = next_report;
        g = g_new;
        pg = bounds.pg_norm(&theta, &g);
        rows.push(TraceRow {
            iteration: iter,
            value: report.value,
            pg_norm: pg,
            step,
        });
        if pg <= opts.grad_tol {
            status = MinimizeStatus::Converged;
            break;
        }
        if decrease <= opts.f_tol {
            status = MinimizeStatus::Stagnated;
            break;
        }
    }
    Ok((current, MinimizeTrace { rows, status }))
}

/// Golden-section search for a minimizer of a unimodal `f` on `[a, b]`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - r * (b - a);
    let mut x2 = a + r * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while (b - a).abs() > tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - r * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + r * (b - a);
            f2 = f(x2);
        }
    }
    let mid = 0.5 * (a + b);
    // The endpoint can win for a minimizer on the boundary.
    [a, mid, b]
        .into_iter()
        .map(|x| (f(x), x))
        .fold((f64::INFINITY, mid), |best, cand| if cand.0 < best.0 { cand } else { best })
        .1
}
