//! Brute-force reference for tiny systems.
//!
//! The true ensemble is integrated on a tensor Gauss-Legendre grid over
//! `D^N`, summed over all `2^N` occupancy vectors. One sweep of the grid
//! stores, per configuration, `I(a) = int exp(-beta V(x, a)) dx` and the
//! first moments, so every quantity that depends on `mu` afterwards is a
//! finite sum. Error estimates compare against the rule of half the order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{HarmonicVariant, SystemState};
use crate::ensemble::{self, SampleBatch};
use crate::error::{DmdError, Result};
use crate::potentials::{Interaction, PairEvaluator};
use crate::quadrature::{composite, for_each_multi_index, AxisNodes};

/// Largest `N * d` the grid oracle accepts.
pub const MAX_GRID_DIM: usize = 6;

/// Half-width, in standard deviations, of the window used for Gaussian
/// site marginals.
const GAUSS_WINDOW: f64 = 12.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleOptions {
    /// Grid nodes per axis for the true ensemble.
    pub quad_order: usize,
    /// Nodes per axis for expectations under the approximate ensemble.
    pub pair_order: usize,
    pub n_max: usize,
    pub max_newton_iters: usize,
    pub residual_tol: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            quad_order: 16,
            pair_order: 64,
            n_max: 3,
            max_newton_iters: 100,
            residual_tol: 1e-10,
        }
    }
}

impl OracleOptions {
    pub fn validate(&self) -> Result<()> {
        if self.quad_order < 8 || self.pair_order < 8 {
            return Err(DmdError::InvalidParameter("oracle orders must be >= 8".into()));
        }
        if !(self.residual_tol > 0.0) || self.max_newton_iters == 0 {
            return Err(DmdError::InvalidParameter("invalid Newton settings".into()));
        }
        Ok(())
    }

    pub fn check_size(&self, state: &SystemState) -> Result<()> {
        let n = state.n_sites();
        if n > self.n_max || n * state.dim() > MAX_GRID_DIM {
            return Err(DmdError::OracleTooLarge(format!(
                "{n} sites in d = {} (limits: N <= {}, N * d <= {MAX_GRID_DIM})",
                state.dim(),
                self.n_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub log_z: f64,
    pub log_z_error: f64,
    pub mu_true: Vec<f64>,
    /// Largest `|E[a_i] - c_i|` at `mu_true`.
    pub mu_residual: f64,
    pub f_exact: f64,
    pub mean_pos_exact: Vec<Vec<f64>>,
    pub log_z_hat: f64,
    /// `E[V - V-hat]` under the approximate ensemble.
    pub expected_delta_v: f64,
    pub relative_entropy: f64,
    pub rn_normalization: f64,
    pub rn_normalization_error: f64,
    /// Error estimate of `relative_entropy`.
    pub quadrature_error_estimate: f64,
}

/// Composite Gauss-Legendre rule with `order` nodes on `[a, b]`, eight per
/// panel where possible.
fn oracle_rule(a: f64, b: f64, order: usize) -> AxisNodes {
    let panels = (order / 8).max(1);
    composite(a, b, panels, order / panels)
}

/// Pair potentials of the true model, one evaluator per kind.
struct TruePotential {
    kinds: Vec<PairEvaluator>,
    mean_field: bool,
    binary: bool,
    c: Vec<f64>,
}

impl TruePotential {
    fn new(state: &SystemState, interaction: &Interaction) -> Result<Self> {
        interaction.validate()?;
        interaction.check_model(state.model())?;
        Ok(match interaction {
            Interaction::Pair(phi) => Self {
                kinds: vec![phi.evaluator()],
                mean_field: state.mean_field(),
                binary: false,
                c: state.c_values(),
            },
            Interaction::Alloy(al) => Self {
                kinds: vec![al.bb.evaluator(), al.ab.evaluator(), al.aa.evaluator()],
                mean_field: false,
                binary: true,
                c: state.c_values(),
            },
        })
    }

    /// Weight and kind index of pair `(i, j)` in configuration `(ai, aj)`.
    fn select(&self, i: usize, j: usize, ai: u8, aj: u8) -> Option<(f64, usize)> {
        if self.binary {
            Some((1.0, (ai + aj) as usize))
        } else if self.mean_field {
            Some((self.c[i] * self.c[j], 0))
        } else if ai == 1 && aj == 1 {
            Some((1.0, 0))
        } else {
            None
        }
    }
}

/// Per-configuration integrals over the grid, for one order.
struct Sweep {
    /// `int exp(-beta V(x, a)) dx`.
    i: Vec<f64>,
    /// `int x exp(-beta V(x, a)) dx`, flat `N * d`.
    j: Vec<Vec<f64>>,
    /// `int exp(-beta V + beta (V - V-hat)) dx`.
    k_hat: Vec<f64>,
}

fn sweep(state: &SystemState, pot: &TruePotential, order: usize) -> Result<Sweep> {
    let n = state.n_sites();
    let d = state.dim();
    let beta = state.beta();
    let l = state.domain().half_width();
    let rule = oracle_rule(-l, l, order);
    let n_cfg = 1usize << n;
    let gated = state.variant() == HarmonicVariant::Gated;
    let sites = state.sites();
    let sizes = vec![rule.len(); n * d];
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();

    let mut out = Sweep {
        i: vec![0.0; n_cfg],
        j: vec![vec![0.0; n * d]; n_cfg],
        k_hat: vec![0.0; n_cfg],
    };
    let mut x = vec![0.0; n * d];
    let mut phi = vec![[0.0f64; 3]; pairs.len()];
    let mut half_u2 = vec![0.0; n];
    for_each_multi_index(&sizes, |idx| {
        let mut w = 1.0;
        for (axis, &m) in idx.iter().enumerate() {
            x[axis] = rule.x[m];
            w *= rule.w[m];
        }
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let mut r2 = 0.0;
            for a in 0..d {
                let t = x[i * d + a] - x[j * d + a];
                r2 += t * t;
            }
            for (slot, kind) in pot.kinds.iter().enumerate() {
                phi[p][slot] = kind.eval_r2(r2);
            }
        }
        for (i, s) in sites.iter().enumerate() {
            half_u2[i] = 0.5
                * (0..d)
                    .map(|a| (x[i * d + a] - s.x[a]).powi(2))
                    .sum::<f64>();
        }
        for cfg in 0..n_cfg {
            let occ = |i: usize| ((cfg >> i) & 1) as u8;
            let mut v = 0.0;
            for (p, &(i, j)) in pairs.iter().enumerate() {
                if let Some((wt, kind)) = pot.select(i, j, occ(i), occ(j)) {
                    v += wt * phi[p][kind];
                }
            }
            let mut vhat = 0.0;
            for (i, s) in sites.iter().enumerate() {
                if !gated || occ(i) == 1 {
                    vhat += s.k * half_u2[i];
                }
            }
            let e = (-beta * v).exp();
            out.i[cfg] += w * e;
            for (jv, xv) in out.j[cfg].iter_mut().zip(&x) {
                *jv += w * e * xv;
            }
            out.k_hat[cfg] += w * ((-beta * v) + beta * (v - vhat)).exp();
        }
    });
    if out.i.iter().chain(&out.k_hat).any(|v| !v.is_finite()) || out.i.iter().all(|&v| v <= 0.0) {
        return Err(DmdError::NumericalFailure {
            iteration: 0,
            message: "oracle grid integral is not finite and positive".into(),
            iterate: Vec::new(),
        });
    }
    Ok(out)
}

fn occupied(cfg: usize, i: usize) -> f64 {
    ((cfg >> i) & 1) as f64
}

/// Log weights `log I(a) + beta mu . a` and their log-sum.
fn log_weights(s: &Sweep, beta: f64, mu: &[f64]) -> (Vec<f64>, f64) {
    let lw: Vec<f64> = s
        .i
        .iter()
        .enumerate()
        .map(|(cfg, &iv)| {
            let dot: f64 = mu.iter().enumerate().map(|(i, m)| m * occupied(cfg, i)).sum();
            iv.ln() + beta * dot
        })
        .collect();
    let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + lw.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    (lw, lse)
}

fn occupancy_means(s: &Sweep, beta: f64, mu: &[f64]) -> Vec<f64> {
    let (lw, lse) = log_weights(s, beta, mu);
    (0..mu.len())
        .map(|i| {
            lw.iter()
                .enumerate()
                .map(|(cfg, v)| occupied(cfg, i) * (v - lse).exp())
                .sum()
        })
        .collect()
}

fn solve_mu(s: &Sweep, state: &SystemState, opts: &OracleOptions) -> Result<(Vec<f64>, f64)> {
    let beta = state.beta();
    let c = state.c_values();
    let n = c.len();
    let residual = |mu: &[f64]| -> Vec<f64> {
        occupancy_means(s, beta, mu)
            .iter()
            .zip(&c)
            .map(|(m, c)| m - c)
            .collect()
    };
    let norm = |r: &[f64]| r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut mu: Vec<f64> = c.iter().map(|c| (c.ln() - (1.0 - c).ln()) / beta).collect();
    let mut r = residual(&mu);
    let h = 1e-6 / beta;
    for _ in 0..opts.max_newton_iters {
        if norm(&r) <= opts.residual_tol {
            return Ok((mu, norm(&r)));
        }
        // Central-difference Jacobian.
        let mut jac = vec![vec![0.0; n]; n];
        for col in 0..n {
            let mut up = mu.clone();
            let mut dn = mu.clone();
            up[col] += h;
            dn[col] -= h;
            let (ru, rd) = (residual(&up), residual(&dn));
            for row in 0..n {
                jac[row][col] = (ru[row] - rd[row]) / (2.0 * h);
            }
        }
        let step = solve_linear(jac, r.iter().map(|v| -v).collect()).ok_or(DmdError::RootFailure {
            iterations: opts.max_newton_iters,
            residual: norm(&r),
        })?;
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = mu.iter().zip(&step).map(|(m, s)| m + t * s).collect();
            let rt = residual(&trial);
            if norm(&rt) < norm(&r) || t < 1e-8 {
                mu = trial;
                r = rt;
                break;
            }
            t *= 0.5;
        }
    }
    if norm(&r) <= opts.residual_tol {
        return Ok((mu, norm(&r)));
    }
    Err(DmdError::RootFailure {
        iterations: opts.max_newton_iters,
        residual: norm(&r),
    })
}

/// Gaussian elimination with partial pivoting.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Normalized per-site marginal of the approximate ensemble on its own rule.
struct Marginal {
    pts: Vec<f64>,
    w: Vec<f64>,
}

fn site_marginal(state: &SystemState, i: usize, gaussian: bool, order: usize) -> Marginal {
    let s = state.site(i);
    let d = state.dim();
    let l = state.domain().half_width();
    let p = state.beta() * s.k;
    let axes: Vec<AxisNodes> = (0..d)
        .map(|a| {
            let mut rule = if gaussian && p > 0.0 {
                let r = GAUSS_WINDOW / p.sqrt();
                oracle_rule((s.x[a] - r).max(-l), (s.x[a] + r).min(l), order)
            } else {
                oracle_rule(-l, l, order)
            };
            if gaussian {
                for (w, x) in rule.w.iter_mut().zip(&rule.x) {
                    *w *= (-0.5 * p * (x - s.x[a]).powi(2)).exp();
                }
            }
            let total: f64 = rule.w.iter().sum();
            rule.w.iter_mut().for_each(|w| *w /= total);
            rule
        })
        .collect();
    let sizes: Vec<usize> = axes.iter().map(|r| r.len()).collect();
    let mut m = Marginal {
        pts: Vec::new(),
        w: Vec::new(),
    };
    for_each_multi_index(&sizes, |idx| {
        let mut w = 1.0;
        for (a, &k) in idx.iter().enumerate() {
            m.pts.push(axes[a].x[k]);
            w *= axes[a].w[k];
        }
        m.w.push(w);
    });
    m
}

/// `E[V - V-hat]` under the approximate ensemble, summed configuration by
/// configuration.
fn expected_delta_v(state: &SystemState, pot: &TruePotential, order: usize) -> f64 {
    let n = state.n_sites();
    let d = state.dim();
    let gated = state.variant() == HarmonicVariant::Gated;
    let c = state.c_values();
    let gaussian = |ai: u8| !gated || ai == 1;
    // marginals[i][a_i]
    let marginals: Vec<[Marginal; 2]> = (0..n)
        .map(|i| {
            [
                site_marginal(state, i, gaussian(0), order),
                site_marginal(state, i, gaussian(1), order),
            ]
        })
        .collect();
    let pair_mean = |i: usize, j: usize, ai: u8, aj: u8, kind: usize| -> f64 {
        let (mi, mj) = (&marginals[i][ai as usize], &marginals[j][aj as usize]);
        let phi = &pot.kinds[kind];
        let mut total = 0.0;
        for (p, wp) in mi.w.iter().enumerate() {
            let xp = &mi.pts[p * d..(p + 1) * d];
            let mut inner = 0.0;
            for (q, wq) in mj.w.iter().enumerate() {
                let yq = &mj.pts[q * d..(q + 1) * d];
                let r2: f64 = xp.iter().zip(yq).map(|(a, b)| (a - b) * (a - b)).sum();
                inner += wq * phi.eval_r2(r2);
            }
            total += wp * inner;
        }
        total
    };
    let mut pair_tab = vec![[[f64::NAN; 2]; 2]; n * n];
    for i in 0..n {
        for j in i + 1..n {
            for ai in 0..2u8 {
                for aj in 0..2u8 {
                    if let Some((wt, kind)) = pot.select(i, j, ai, aj) {
                        pair_tab[i * n + j][ai as usize][aj as usize] = wt * pair_mean(i, j, ai, aj, kind);
                    } else {
                        pair_tab[i * n + j][ai as usize][aj as usize] = 0.0;
                    }
                }
            }
        }
    }
    let vhat_tab: Vec<f64> = (0..n)
        .map(|i| {
            let m = &marginals[i][1];
            let s = state.site(i);
            m.w.iter()
                .enumerate()
                .map(|(p, w)| {
                    let u2: f64 = (0..d).map(|a| (m.pts[p * d + a] - s.x[a]).powi(2)).sum();
                    w * 0.5 * s.k * u2
                })
                .sum()
        })
        .collect();
    let mut total = 0.0;
    for cfg in 0..1usize << n {
        let occ = |i: usize| ((cfg >> i) & 1) as u8;
        let prob: f64 = (0..n)
            .map(|i| if occ(i) == 1 { c[i] } else { 1.0 - c[i] })
            .product();
        let mut dv = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                dv += pair_tab[i * n + j][occ(i) as usize][occ(j) as usize];
            }
            if gaussian(occ(i)) {
                dv -= vhat_tab[i];
            }
        }
        total += prob * dv;
    }
    total
}

/// Everything computed from one grid sweep at a given order.
struct Evaluation {
    log_z: f64,
    mu: Vec<f64>,
    mu_residual: f64,
    mean_pos: Vec<Vec<f64>>,
    delta_v: f64,
    rn: f64,
}

fn evaluate_at(
    state: &SystemState,
    pot: &TruePotential,
    opts: &OracleOptions,
    order: usize,
    pair_order: usize,
    mu: Option<&[f64]>,
    log_z_hat: f64,
) -> Result<Evaluation> {
    let beta = state.beta();
    let s = sweep(state, pot, order)?;
    let (mu, mu_residual) = match mu {
        Some(m) => (m.to_vec(), f64::NAN),
        None => solve_mu(&s, state, opts)?,
    };
    let (lw, lse) = log_weights(&s, beta, &mu);
    let n = state.n_sites();
    let d = state.dim();
    let mut mean = vec![0.0; n * d];
    for (cfg, v) in lw.iter().enumerate() {
        let p = (v - lse).exp() / s.i[cfg];
        for (m, j) in mean.iter_mut().zip(&s.j[cfg]) {
            *m += p * j;
        }
    }
    let mu_hat: Vec<f64> = state.sites().iter().map(|x| x.mu_hat).collect();
    // E^nu[d nu-hat / d nu] with the derivative written out literally:
    // (Z / Z-hat) exp{beta (V - V-hat) + beta (mu-hat - mu) . a}.
    let mut rn = 0.0;
    for cfg in 0..1usize << n {
        let mut dot_mu = 0.0;
        let mut dot_diff = 0.0;
        for i in 0..n {
            dot_mu += mu[i] * occupied(cfg, i);
            dot_diff += (mu_hat[i] - mu[i]) * occupied(cfg, i);
        }
        let log_factor = beta * dot_mu - lse + (lse - log_z_hat) + beta * dot_diff;
        rn += s.k_hat[cfg] * log_factor.exp();
    }
    Ok(Evaluation {
        log_z: lse,
        mu,
        mu_residual,
        mean_pos: mean.chunks(d).map(|c| c.to_vec()).collect(),
        delta_v: expected_delta_v(state, pot, pair_order),
        rn,
    })
}

/// Runs the full oracle: `mu` root-solve, exact free energy, mean
/// positions, relative entropy and the normalization audit.
pub fn run_oracle(state: &SystemState, interaction: &Interaction, opts: &OracleOptions) -> Result<OracleResult> {
    opts.validate()?;
    opts.check_size(state)?;
    let pot = TruePotential::new(state, interaction)?;
    let beta = state.beta();
    let log_z_hat = ensemble::log_partition_hat(state)?;
    let fine = evaluate_at(state, &pot, opts, opts.quad_order, opts.pair_order, None, log_z_hat)?;
    let coarse = evaluate_at(
        state,
        &pot,
        opts,
        opts.quad_order / 2,
        opts.pair_order / 2,
        Some(&fine.mu),
        log_z_hat,
    )?;
    let c = state.c_values();
    let relative = |e: &Evaluation| {
        let dot: f64 = state
            .sites()
            .iter()
            .zip(&e.mu)
            .zip(&c)
            .map(|((s, m), c)| (s.mu_hat - m) * c)
            .sum();
        beta * e.delta_v + beta * dot + e.log_z - log_z_hat
    };
    let r = relative(&fine);
    let mu_c: f64 = fine.mu.iter().zip(&c).map(|(m, c)| m * c).sum();
    Ok(OracleResult {
        log_z: fine.log_z,
        log_z_error: (fine.log_z - coarse.log_z).abs(),
        mu_residual: fine.mu_residual,
        f_exact: -fine.log_z / beta + mu_c,
        mean_pos_exact: fine.mean_pos.clone(),
        log_z_hat,
        expected_delta_v: fine.delta_v,
        relative_entropy: r,
        rn_normalization: fine.rn,
        rn_normalization_error: (fine.rn - coarse.rn).abs(),
        // Summed by component so that errors in log Z and E[Delta V]
        // cannot cancel.
        quadrature_error_estimate: (fine.log_z - coarse.log_z).abs() + beta * (fine.delta_v - coarse.delta_v).abs(),
        mu_true: fine.mu,
    })
}

fn checked(state: &SystemState, interaction: &Interaction, opts: &OracleOptions) -> Result<TruePotential> {
    opts.validate()?;
    opts.check_size(state)?;
    TruePotential::new(state, interaction)
}

fn check_mu(state: &SystemState, mu: &[f64]) -> Result<()> {
    if mu.len() != state.n_sites() {
        return Err(DmdError::Shape {
            expected: state.n_sites(),
            got: mu.len(),
        });
    }
    Ok(())
}

/// `log Z` of the true ensemble at `mu`, with its error estimate.
pub fn exact_partition(
    state: &SystemState,
    interaction: &Interaction,
    mu: &[f64],
    opts: &OracleOptions,
) -> Result<(f64, f64)> {
    let pot = checked(state, interaction, opts)?;
    check_mu(state, mu)?;
    let beta = state.beta();
    let fine = log_weights(&sweep(state, &pot, opts.quad_order)?, beta, mu).1;
    let coarse = log_weights(&sweep(state, &pot, opts.quad_order / 2)?, beta, mu).1;
    Ok((fine, (fine - coarse).abs()))
}

/// Solves `E^nu[a_i](mu) = c_i`.
pub fn solve_true_mu(state: &SystemState, interaction: &Interaction, opts: &OracleOptions) -> Result<Vec<f64>> {
    let pot = checked(state, interaction, opts)?;
    Ok(solve_mu(&sweep(state, &pot, opts.quad_order)?, state, opts)?.0)
}

/// `F = -beta^-1 log Z + mu . c`.
pub fn exact_free_energy(
    state: &SystemState,
    interaction: &Interaction,
    mu: &[f64],
    opts: &OracleOptions,
) -> Result<f64> {
    let (log_z, _) = exact_partition(state, interaction, mu, opts)?;
    let dot: f64 = mu.iter().zip(state.c_values()).map(|(m, c)| m * c).sum();
    Ok(-log_z / state.beta() + dot)
}

/// `(R, E^nu[d nu-hat / d nu])` at `mu`. A value of `R` below minus its
/// error estimate is reported as an inconsistency.
pub fn relative_entropy(
    state: &SystemState,
    interaction: &Interaction,
    mu: &[f64],
    opts: &OracleOptions,
) -> Result<(f64, f64)> {
    let pot = checked(state, interaction, opts)?;
    check_mu(state, mu)?;
    let beta = state.beta();
    let log_z_hat = ensemble::log_partition_hat(state)?;
    let c = state.c_values();
    let dot: f64 = (0..c.len()).map(|i| (state.site(i).mu_hat - mu[i]) * c[i]).sum();
    let fine = evaluate_at(state, &pot, opts, opts.quad_order, opts.pair_order, Some(mu), log_z_hat)?;
    let coarse = evaluate_at(state, &pot, opts, opts.quad_order / 2, opts.pair_order / 2, Some(mu), log_z_hat)?;
    let r = beta * fine.delta_v + beta * dot + fine.log_z - log_z_hat;
    let rn = fine.rn;
    let err = (fine.log_z - coarse.log_z).abs() + beta * (fine.delta_v - coarse.delta_v).abs();
    if r < -err - 1e-12 {
        return Err(DmdError::Consistency(format!(
            "relative entropy {r:e} is below minus its error estimate {err:e}"
        )));
    }
    Ok((r, rn))
}

/// `E^nu[x_i]`.
pub fn exact_mean_position(
    state: &SystemState,
    interaction: &Interaction,
    mu: &[f64],
    opts: &OracleOptions,
    i: usize,
) -> Result<Vec<f64>> {
    let pot = checked(state, interaction, opts)?;
    check_mu(state, mu)?;
    if i >= state.n_sites() {
        return Err(DmdError::InvalidParameter(format!("site {i} out of range")));
    }
    let s = sweep(state, &pot, opts.quad_order)?;
    let (lw, lse) = log_weights(&s, state.beta(), mu);
    let d = state.dim();
    let mut mean = vec![0.0; d];
    for (cfg, v) in lw.iter().enumerate() {
        let p = (v - lse).exp() / s.i[cfg];
        for a in 0..d {
            mean[a] += p * s.j[cfg][i * d + a];
        }
    }
    Ok(mean)
}

fn uniform01(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Rejection sampling from the true ensemble at `mu`. Proposals draw `a`
/// from independent Bernoulli(logistic(beta mu_i)) and `x` uniformly on
/// `D^N`; `v_floor` must bound the true potential from below.
pub fn rejection_sample(
    state: &SystemState,
    interaction: &Interaction,
    mu: &[f64],
    v_floor: f64,
    seed: u64,
    n: usize,
) -> Result<SampleBatch> {
    check_mu(state, mu)?;
    let pot = TruePotential::new(state, interaction)?;
    let n_sites = state.n_sites();
    let d = state.dim();
    let beta = state.beta();
    let l = state.domain().half_width();
    let p_occ: Vec<f64> = mu.iter().map(|m| ensemble::logistic(beta * m)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = SampleBatch {
        n_samples: 0,
        n_sites,
        dim: d,
        x: Vec::with_capacity(n * n_sites * d),
        a: Vec::with_capacity(n * n_sites),
    };
    let mut x = vec![0.0; n_sites * d];
    let mut a = vec![0u8; n_sites];
    let mut attempts: u64 = 0;
    while batch.n_samples < n {
        attempts += 1;
        if attempts > 1_000_000u64.max(10_000 * n as u64) {
            return Err(DmdError::NumericalFailure {
                iteration: batch.n_samples,
                message: "rejection sampler acceptance rate too low".into(),
                iterate: Vec::new(),
            });
        }
        for (ai, p) in a.iter_mut().zip(&p_occ) {
            *ai = u8::from(uniform01(&mut rng) < *p);
        }
        for xv in x.iter_mut() {
            *xv = -l + 2.0 * l * uniform01(&mut rng);
        }
        let mut v = 0.0;
        for i in 0..n_sites {
            for j in i + 1..n_sites {
                if let Some((wt, kind)) = pot.select(i, j, a[i], a[j]) {
                    let r2: f64 = (0..d).map(|k| (x[i * d + k] - x[j * d + k]).powi(2)).sum();
                    v += wt * pot.kinds[kind].eval_r2(r2);
                }
            }
        }
        if v < v_floor - 1e-12 {
            return Err(DmdError::InvalidParameter(format!(
                "v_floor {v_floor} exceeds a sampled potential value {v}"
            )));
        }
        if uniform01(&mut rng) < (-beta * (v - v_floor)).exp() {
            batch.x.extend_from_slice(&x);
            batch.a.extend_from_slice(&a);
            batch.n_samples += 1;
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Model, OccupancyVector, Positions, ThermodynamicDomain};
    use crate::potentials::{v_true, AlloyPotentialSpec, PairPotentialSpec};
    use approx::assert_relative_eq;

    fn state(n: usize, dim: usize, c: f64, model: Model, mf: bool) -> SystemState {
        let d = ThermodynamicDomain::new(1.0, dim, 1.0).unwrap();
        let params = (0..n).map(|i| (vec![0.3 * i as f64 - 0.3; dim], 1.5, c)).collect();
        let topo = (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect();
        let variant = HarmonicVariant::default_for(model);
        SystemState::new(d, params, topo, model, variant, mf).unwrap()
    }

    #[test]
    fn flat_partition() {
        let s = state(2, 1, 0.5, Model::Vacancy, false);
        let zero = Interaction::Pair(PairPotentialSpec::zero());
        let opts = OracleOptions::default();
        let (lz, _) = exact_partition(&s, &zero, &[0.0, 0.0], &opts).unwrap();
        assert_relative_eq!(lz, (16.0f64).ln(), max_relative = 1e-13);
        let mu = [0.4, -1.1];
        let (lz, _) = exact_partition(&s, &zero, &mu, &opts).unwrap();
        let expected = 2.0 * 2f64.ln() + mu.iter().map(|m| (1.0 + f64::exp(*m)).ln()).sum::<f64>();
        assert_relative_eq!(lz, expected, max_relative = 1e-13);
    }

    #[test]
    fn flat_mu_is_logit() {
        let s = state(3, 1, 0.3, Model::Vacancy, false);
        let zero = Interaction::Pair(PairPotentialSpec::zero());
        let mu = solve_true_mu(&s, &zero, &OracleOptions::default()).unwrap();
        for m in mu {
            assert_relative_eq!(m, (0.3f64 / 0.7).ln(), max_relative = 1e-10);
        }
        let half = state(2, 1, 0.5, Model::Vacancy, false);
        let mu = solve_true_mu(&half, &zero, &OracleOptions::default()).unwrap();
        assert!(mu.iter().all(|m| m.abs() < 1e-10));
        let f = exact_free_energy(&half, &zero, &mu, &OracleOptions::default()).unwrap();
        assert_relative_eq!(f, -2.0 * 4f64.ln(), max_relative = 1e-10);
    }

    #[test]
    fn mean_field_mu_is_logit() {
        let s = state(2, 1, 0.3, Model::Vacancy, true);
        let phi = Interaction::Pair(PairPotentialSpec::morse(1.0, 0.5, 2.0, None, false));
        let mu = solve_true_mu(&s, &phi, &OracleOptions::default()).unwrap();
        for m in mu {
            assert_relative_eq!(m, (0.3f64 / 0.7).ln(), max_relative = 1e-9);
        }
    }

    #[test]
    fn grid_potential_matches_system_potential() {
        let s = state(3, 2, 0.4, Model::Binary, false);
        let alloy = AlloyPotentialSpec {
            aa: PairPotentialSpec::morse(1.0, 0.5, 2.0, None, false),
            ab: PairPotentialSpec::harmonic_bond(2.0, 0.3, None, false),
            bb: PairPotentialSpec::lennard_jones(0.5, 0.4, Some(1.0), true),
        };
        let inter = Interaction::Alloy(alloy);
        let pot = TruePotential::new(&s, &inter).unwrap();
        let x = Positions::from_points(&[vec![0.1, 0.2], vec![-0.3, 0.5], vec![0.7, -0.6]]).unwrap();
        for cfg in 0..8 {
            let a: Vec<u8> = (0..3).map(|i| ((cfg >> i) & 1) as u8).collect();
            let mut v = 0.0;
            for i in 0..3 {
                for j in i + 1..3 {
                    let (wt, kind) = pot.select(i, j, a[i], a[j]).unwrap();
                    v += wt * pot.kinds[kind].eval_r2(x.distance(i, j).powi(2));
                }
            }
            let expected = v_true(&s, &inter, &x, &OccupancyVector::new(a).unwrap()).unwrap();
            assert_relative_eq!(v, expected, max_relative = 1e-14);
        }
    }

    #[test]
    fn relative_entropy_nonnegative_and_normalized() {
        let s = state(2, 1, 0.6, Model::Vacancy, false);
        let phi = Interaction::Pair(PairPotentialSpec::harmonic_bond(1.0, 0.2, None, false));
        let r = run_oracle(&s, &phi, &OracleOptions::default()).unwrap();
        assert!(r.relative_entropy > 0.0);
        assert!((r.rn_normalization - 1.0).abs() <= r.rn_normalization_error + 1e-10);
        assert!(r.mu_residual <= 1e-10);
    }

    #[test]
    fn size_guard() {
        let s = state(4, 1, 0.5, Model::Vacancy, false);
        let zero = Interaction::Pair(PairPotentialSpec::zero());
        assert!(matches!(
            run_oracle(&s, &zero, &OracleOptions::default()),
            Err(DmdError::OracleTooLarge(_))
        ));
    }

    #[test]
    fn linear_solver() {
        let x = solve_linear(vec![vec![0.0, 2.0], vec![1.0, 1.0]], vec![4.0, 3.0]).unwrap();
        assert_relative_eq!(x[0], 1.0);
        assert_relative_eq!(x[1], 2.0);
    }
}
