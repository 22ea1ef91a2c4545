//! Occupancy evolution by gradient flow or by the Arrhenius master
//! equation, alternating with re-minimization over `(X, k)`.
//!
//! Both laws are assembled from per-edge fluxes that are antisymmetric in
//! the edge endpoints, so `sum_i dc_i/dt` vanishes term by term.

use serde::{Deserialize, Serialize};

use crate::domain::{SystemState, C_FLOOR};
use crate::error::{DmdError, Result};
use crate::free_energy::{FreeEnergyReport, LogDomainTerm, Objective};
use crate::minimizer::{minimize, MinimizeOptions};

/// Largest `|beta (f_i - f_j)|` accepted before exponentials overflow.
pub const MAX_RATE_EXPONENT: f64 = 700.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Law {
    GradientFlow,
    MasterEquation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    Euler,
    Rk4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    pub law: Law,
    /// Uniform mobility `k_ij` of the gradient-flow law.
    #[serde(default = "one")]
    pub mobility: f64,
    /// Attempt frequency of the master equation.
    #[serde(default = "one")]
    pub attempt_frequency: f64,
    /// Migration barrier `Q_m` of the master equation.
    #[serde(default)]
    pub migration_barrier: f64,
    pub dt: f64,
    pub t_end: f64,
    #[serde(default = "one_usize")]
    pub reminimize_every: usize,
    #[serde(default)]
    pub integrator: Integrator,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DmdError::InvalidParameter(m.to_string()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return bad("t_end must be >= 0");
        }
        if !(self.mobility >= 0.0) || !(self.attempt_frequency >= 0.0) {
            return bad("mobility and attempt_frequency must be >= 0");
        }
        if !self.migration_barrier.is_finite() {
            return bad("migration_barrier must be finite");
        }
        if self.reminimize_every == 0 {
            return bad("reminimize_every must be >= 1");
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

fn check_len(state: &SystemState, v: &[f64]) -> Result<()> {
    if v.len() != state.n_sites() {
        return Err(DmdError::Shape {
            expected: state.n_sites(),
            got: v.len(),
        });
    }
    Ok(())
}

/// `dc_i/dt = sum_{j in N(i)} k (g_j - g_i)`.
pub fn rate_gradient_flow(state: &SystemState, grads: &[f64], mobility: f64) -> Result<Vec<f64>> {
    check_len(state, grads)?;
    let mut rate = vec![0.0; state.n_sites()];
    for (i, j) in state.edges() {
        let flux = mobility * (grads[j] - grads[i]);
        rate[i] += flux;
        rate[j] -= flux;
    }
    Ok(rate)
}

/// `f_i = dF/dc_i - beta^-1 log(c_i / (1 - c_i))`.
pub fn occupancy_energies(state: &SystemState, grads: &[f64]) -> Vec<f64> {
    let beta = state.beta();
    state
        .sites()
        .iter()
        .zip(grads)
        .map(|(s, g)| g - (s.c.ln() - (1.0 - s.c).ln()) / beta)
        .collect()
}

/// Master-equation rates for per-site energies `f`.
pub fn rate_master_equation(
    state: &SystemState,
    f: &[f64],
    attempt_frequency: f64,
    migration_barrier: f64,
) -> Result<Vec<f64>> {
    check_len(state, f)?;
    let beta = state.beta();
    let prefactor = attempt_frequency * (-beta * migration_barrier).exp();
    let c = state.c_values();
    let mut rate = vec![0.0; state.n_sites()];
    for (i, j) in state.edges() {
        let e = beta * (f[i] - f[j]);
        if !(e.abs() <= MAX_RATE_EXPONENT) {
            return Err(DmdError::RateOverflow { i, j, exponent: e });
        }
        // Net flow from j into i.
        let flux = prefactor * (c[j] * (1.0 - c[i]) * (-e).exp() - c[i] * (1.0 - c[j]) * e.exp());
        rate[i] += flux;
        rate[j] -= flux;
    }
    Ok(rate)
}

/// Half the inverse of the largest total outflow rate per unit occupancy.
pub fn stability_bound(state: &SystemState, cfg: &DynamicsConfig, grads: &[f64]) -> f64 {
    let beta = state.beta();
    let n = state.n_sites();
    let c = state.c_values();
    let mut out = vec![0.0; n];
    match cfg.law {
        Law::GradientFlow => {
            // Curvature of the entropy term dominates d g_i / d c_i.
            for (i, nbrs) in state.topology().iter().enumerate() {
                out[i] = cfg.mobility * nbrs.len() as f64 / (beta * c[i] * (1.0 - c[i]));
            }
        }
        Law::MasterEquation => {
            let f = occupancy_energies(state, grads);
            let pre = cfg.attempt_frequency * (-beta * cfg.migration_barrier).exp();
            for (i, j) in state.edges() {
                let e = (beta * (f[i] - f[j])).clamp(-MAX_RATE_EXPONENT, MAX_RATE_EXPONENT);
                out[i] += pre * (1.0 - c[j]) * e.exp();
                out[j] += pre * (1.0 - c[i]) * (-e).exp();
            }
        }
    }
    let max = out.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        0.5 / max
    } else {
        f64::INFINITY
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub c: Vec<f64>,
    /// Flat, `N * d`.
    pub x: Vec<f64>,
    pub k: Vec<f64>,
    pub value: f64,
    pub sum_c: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
    /// Reports at each re-minimization, with their times.
    pub checkpoints: Vec<(f64, FreeEnergyReport)>,
    /// Largest `|sum c_new - sum c_old|` over steps, before clamping.
    pub max_step_drift: f64,
    /// Steps in which clamping was needed.
    pub clamped_steps: usize,
    /// Steps taken with `dt` above the stability bound.
    pub stability_warnings: usize,
    pub final_state: SystemState,
}

fn rates(state: &SystemState, cfg: &DynamicsConfig, grads: &[f64]) -> Result<Vec<f64>> {
    match cfg.law {
        Law::GradientFlow => rate_gradient_flow(state, grads, cfg.mobility),
        Law::MasterEquation => {
            let f = occupancy_energies(state, grads);
            rate_master_equation(state, &f, cfg.attempt_frequency, cfg.migration_barrier)
        }
    }
}

fn rate_at(state: &SystemState, c: &[f64], cfg: &DynamicsConfig, obj: &Objective) -> Result<Vec<f64>> {
    let s = state.with_c(c)?;
    let r = obj.evaluate(&s)?;
    rates(&s, cfg, &r.grad_c)
}

/// Clamps into `[C_FLOOR, 1 - C_FLOOR]` and hands the clipped mass to the
/// remaining sites in proportion to their room in the needed direction.
/// Returns whether anything was clamped.
pub fn clamp_and_redistribute(c: &mut [f64]) -> bool {
    let (lo, hi) = (C_FLOOR, 1.0 - C_FLOOR);
    let mut clamped = false;
    for _ in 0..c.len().max(1) {
        let mut excess = 0.0;
        let mut free = vec![true; c.len()];
        for (i, v) in c.iter_mut().enumerate() {
            if *v < lo || *v > hi {
                let t = v.clamp(lo, hi);
                excess += *v - t;
                *v = t;
                free[i] = false;
                clamped = true;
            }
        }
        if excess == 0.0 {
            break;
        }
        let room: Vec<f64> = c
            .iter()
            .zip(&free)
            .map(|(&v, &f)| match (f, excess > 0.0) {
                (false, _) => 0.0,
                (true, true) => hi - v,
                (true, false) => v - lo,
            })
            .collect();
        let total: f64 = room.iter().sum();
        if total <= 0.0 {
            break;
        }
        for (v, r) in c.iter_mut().zip(&room) {
            *v += excess * r / total;
        }
    }
    clamped
}

/// Runs the two-step loop from `state` up to `cfg.t_end`.
pub fn evolve(
    state: &SystemState,
    cfg: &DynamicsConfig,
    obj: &Objective,
    opts: &MinimizeOptions,
) -> Result<Trajectory> {
    cfg.validate()?;
    obj.check(state)?;
    let at = |t: f64| move |e: DmdError| DmdError::AtTime { t, source: Box::new(e) };
    // The log|D| term is constant in (X, k) and shifts every dF/dc_i by the
    // same amount, so it cannot move the trajectory. Stepping without it
    // keeps that exact in floating point too.
    let user = obj;
    let obj = &obj.with_log_domain(LogDomainTerm::Exclude);
    let n_steps = cfg.n_steps();
    let mut current = state.clone();
    let mut rows = Vec::with_capacity(n_steps + 1);
    let mut checkpoints = Vec::new();
    let mut max_step_drift: f64 = 0.0;
    let mut clamped_steps = 0;
    let mut stability_warnings = 0;

    for step in 0..=n_steps {
        let t = step as f64 * cfg.dt;
        let due = step % cfg.reminimize_every == 0;
        if due {
            current = minimize(&current, obj, opts).map_err(at(t))?.0;
        }
        let report = obj.evaluate(&current).map_err(at(t))?;
        let c = current.c_values();
        rows.push(TrajectoryRow {
            t,
            sum_c: c.iter().sum(),
            c: c.clone(),
            x: current.means().as_slice().to_vec(),
            k: current.k_values(),
            value: report.value + user.log_domain_value(&current),
        });
        if due {
            checkpoints.push((t, user.evaluate(&current).map_err(at(t))?));
        }
        if step == n_steps {
            break;
        }

        if cfg.dt > stability_bound(&current, cfg, &report.grad_c) {
            stability_warnings += 1;
            if stability_warnings == 1 {
                log::warn!("dt = {} exceeds the stability bound at t = {t}", cfg.dt);
            }
        }
        let k1 = rates(&current, cfg, &report.grad_c).map_err(at(t))?;
        let dc: Vec<f64> = match cfg.integrator {
            Integrator::Euler => k1,
            Integrator::Rk4 => {
                let dt = cfg.dt;
                let stage = |base: &[f64], k: &[f64], h: f64| -> Vec<f64> {
                    let mut s: Vec<f64> = base.iter().zip(k).map(|(c, k)| c + h * k).collect();
                    clamp_and_redistribute(&mut s);
                    s
                };
                let k2 = rate_at(&current, &stage(&c, &k1, 0.5 * dt), cfg, obj).map_err(at(t))?;
                let k3 = rate_at(&current, &stage(&c, &k2, 0.5 * dt), cfg, obj).map_err(at(t))?;
                let k4 = rate_at(&current, &stage(&c, &k3, dt), cfg, obj).map_err(at(t))?;
                (0..c.len())
                    .map(|i| (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0)
                    .collect()
            }
        };
        let mut next: Vec<f64> = c.iter().zip(&dc).map(|(c, r)| c + cfg.dt * r).collect();
        let drift = next.iter().sum::<f64>() - c.iter().sum::<f64>();
        max_step_drift = max_step_drift.max(drift.abs());
        if clamp_and_redistribute(&mut next) {
            clamped_steps += 1;
        }
        current = current.with_c(&next).map_err(at(t))?;
    }
    Ok(Trajectory {
        rows,
        checkpoints,
        max_step_drift,
        clamped_steps,
        stability_warnings,
        final_state: current,
    })
}
