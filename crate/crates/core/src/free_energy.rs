//! Approximate free-energy functionals, the interaction estimator and the
//! gradients in `c`, `X` and `k`.
//!
//! `Delta V = V - V-hat`. Its expectation is computed either by Monte Carlo
//! over exact draws from the approximate ensemble or by pair quadrature.
//! The approximate ensemble is a product measure and every true potential
//! is a sum of pair terms, so `E[V]` is a sum of two-site expectations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{HarmonicVariant, Model, SystemState};
use crate::ensemble::{self, site_closed_form, SampleBatch, SiteClosedForm};
use crate::error::{DmdError, Result};
use crate::pair_quadrature::{pair_kernel, MarginalShape, PairKernel, SiteMarginal};
use crate::potentials::{Interaction, PairEvaluator};
use crate::quadrature::PanelRule;

/// Default number of Monte Carlo draws.
pub const DEFAULT_MC_SAMPLES: usize = 20_000;

/// Default pair-quadrature order: nodes per axis across a site's window.
pub const DEFAULT_QUADRATURE_ORDER: usize = 64;

/// Projected parameter-gradient norm above which a report is flagged as
/// away from a minimizer.
pub const STATIONARITY_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Functional {
    /// Bounded-domain functional with occupancy-gated harmonic potential.
    FHatVacancy,
    /// Binary alloy functional.
    FHatBinary,
    /// Whole-space functional of the original formulation.
    F2011,
    /// Vacancy functional with an always-on harmonic potential.
    FHatAlwaysOn,
}

impl Functional {
    pub fn name(&self) -> &'static str {
        match self {
            Functional::FHatVacancy => "f_hat_vacancy",
            Functional::FHatBinary => "f_hat_binary",
            Functional::F2011 => "f_2011",
            Functional::FHatAlwaysOn => "f_hat_always_on",
        }
    }

    /// The functional matching a model and harmonic variant.
    pub fn natural_for(model: Model, variant: HarmonicVariant) -> Self {
        match (model, variant) {
            (Model::Binary, _) => Functional::FHatBinary,
            (Model::Vacancy, HarmonicVariant::Gated) => Functional::FHatVacancy,
            (Model::Vacancy, HarmonicVariant::AlwaysOn) => Functional::FHatAlwaysOn,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Estimator {
    MonteCarlo {
        samples: usize,
        seed: u64,
    },
    PairQuadrature {
        order: usize,
        #[serde(default)]
        panel_width: Option<f64>,
    },
}

impl Default for Estimator {
    fn default() -> Self {
        Estimator::PairQuadrature {
            order: DEFAULT_QUADRATURE_ORDER,
            panel_width: None,
        }
    }
}

impl Estimator {
    pub fn panel_rule(&self) -> Option<PanelRule> {
        match *self {
            Estimator::PairQuadrature { order, panel_width } => {
                Some(PanelRule::from_order(order, panel_width))
            }
            Estimator::MonteCarlo { .. } => None,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Estimator::MonteCarlo { samples, .. } if samples < 2 => Err(DmdError::InvalidParameter(
                "Monte Carlo needs at least two samples".into(),
            )),
            Estimator::PairQuadrature { order, .. } if order == 0 => {
                Err(DmdError::InvalidParameter("quadrature order must be positive".into()))
            }
            Estimator::PairQuadrature {
                panel_width: Some(h),
                ..
            } if !(h > 0.0) => Err(DmdError::InvalidParameter(format!(
                "panel width must be positive, got {h}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Treatment of the finite-size `beta^-1 sum (c_i - 1) log|D|` term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogDomainTerm {
    #[default]
    Include,
    Exclude,
    /// Use `log(volume)` in place of `log|D|`.
    Volume(f64),
}

impl LogDomainTerm {
    fn log_volume(&self, state: &SystemState) -> f64 {
        match *self {
            LogDomainTerm::Include => state.domain().log_volume(),
            LogDomainTerm::Exclude => 0.0,
            LogDomainTerm::Volume(v) => v.ln(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyReport {
    pub functional: Functional,
    pub value: f64,
    pub interaction: f64,
    pub entropy_term: f64,
    pub logzi_term: f64,
    pub logd_term: f64,
    pub grad_c: Vec<f64>,
    /// Flat, `N * d`.
    pub grad_x: Vec<f64>,
    pub grad_k: Vec<f64>,
    pub mc_std_error: f64,
    /// Infinity norm of the projected `(X, k)` gradient.
    pub param_grad_norm: f64,
    /// False when `param_grad_norm` exceeds [`STATIONARITY_TOL`]; `grad_c`
    /// is then reported away from a minimizer.
    pub stationary: bool,
}

/// Result of [`estimate_delta_v`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaVEstimate {
    pub value: f64,
    pub std_error: f64,
    /// Embedded coarse-rule difference; zero for Monte Carlo.
    pub quadrature_error: f64,
}

/// Everything needed to evaluate a functional on a state.
#[derive(Clone, Copy, Debug)]
pub struct Objective<'a> {
    pub interaction: &'a Interaction,
    pub functional: Functional,
    pub estimator: Estimator,
    pub log_domain: LogDomainTerm,
}

impl<'a> Objective<'a> {
    pub fn new(interaction: &'a Interaction, functional: Functional, estimator: Estimator) -> Self {
        Self {
            interaction,
            functional,
            estimator,
            log_domain: LogDomainTerm::Include,
        }
    }

    pub fn with_log_domain(mut self, log_domain: LogDomainTerm) -> Self {
        self.log_domain = log_domain;
        self
    }

    pub fn check(&self, state: &SystemState) -> Result<()> {
        check_compatibility(state, self.interaction, self.functional, &self.estimator)
    }

    /// The `beta^-1 sum (c_i - 1) log|D|` contribution to the value; zero
    /// for functionals without it.
    pub fn log_domain_value(&self, state: &SystemState) -> f64 {
        if self.functional != Functional::FHatVacancy {
            return 0.0;
        }
        let log_d = self.log_domain.log_volume(state);
        let mut logd = 0.0;
        for s in state.sites() {
            logd += (s.c - 1.0) * log_d;
        }
        logd / state.beta()
    }

    pub fn evaluate(&self, state: &SystemState) -> Result<FreeEnergyReport> {
        self.check(state)?;
        match self.functional {
            Functional::F2011 => evaluate_2011(state, self),
            _ => evaluate_hat(state, self),
        }
    }
}

/// Validates a functional/model/estimator combination.
pub fn check_compatibility(
    state: &SystemState,
    interaction: &Interaction,
    functional: Functional,
    estimator: &Estimator,
) -> Result<()> {
    interaction.validate()?;
    interaction.check_model(state.model())?;
    estimator.validate()?;
    let (model, variant) = (state.model(), state.variant());
    let ok = match functional {
        Functional::FHatVacancy => model == Model::Vacancy && variant == HarmonicVariant::Gated,
        Functional::FHatAlwaysOn => model == Model::Vacancy && variant == HarmonicVariant::AlwaysOn,
        Functional::FHatBinary => model == Model::Binary,
        Functional::F2011 => model == Model::Vacancy,
    };
    if !ok {
        return Err(DmdError::Config(format!(
            "functional {} is incompatible with model {:?} (variant {:?})",
            functional.name(),
            model,
            variant
        )));
    }
    if functional == Functional::F2011 {
        if let Estimator::MonteCarlo { .. } = estimator {
            return Err(DmdError::UnsupportedEstimator(
                "f_2011 integrates over the whole space; use pair_quadrature".into(),
            ));
        }
        if let Some(i) = state.sites().iter().position(|s| !(s.k > 0.0)) {
            return Err(DmdError::InvalidParameter(format!(
                "f_2011 needs k > 0 on every site; site {i} has k = {}",
                state.site(i).k
            )));
        }
    }
    Ok(())
}

/// `E[Delta V]` and its parameter derivatives at fixed `(X, k, c)`.
struct DeltaVTerms {
    value: f64,
    dx: Vec<f64>,
    dk: Vec<f64>,
    dc: Vec<f64>,
    std_error: f64,
}

fn closed_forms(state: &SystemState) -> Vec<SiteClosedForm> {
    state
        .sites()
        .iter()
        .map(|s| site_closed_form(state.domain(), &s.x, s.k))
        .collect()
}

fn gated(state: &SystemState) -> bool {
    state.variant() == HarmonicVariant::Gated
}

fn evaluate_hat(state: &SystemState, obj: &Objective) -> Result<FreeEnergyReport> {
    let beta = state.beta();
    let n = state.n_sites();
    let d = state.dim();
    let cf = closed_forms(state);
    let dv = delta_v_terms(state, obj.interaction, &obj.estimator, &cf, true)?;
    let log_d = obj.log_domain.log_volume(state);
    let vac = obj.functional == Functional::FHatVacancy;

    let mut entropy = 0.0;
    let mut logzi = 0.0;
    let mut logd = 0.0;
    let mut grad_c = dv.dc.clone();
    let mut grad_x = dv.dx.clone();
    let mut grad_k = dv.dk.clone();
    for (i, s) in state.sites().iter().enumerate() {
        let c = s.c;
        entropy += c * c.ln() + (1.0 - c) * (1.0 - c).ln();
        let logit = c.ln() - (1.0 - c).ln();
        // Weight of log Z_i in the functional.
        let wz = if vac { c } else { 1.0 };
        logzi -= wz * cf[i].log_z;
        if vac {
            logd += (c - 1.0) * log_d;
            grad_c[i] += (logit - cf[i].log_z + log_d) / beta;
        } else {
            grad_c[i] += logit / beta;
        }
        for a in 0..d {
            grad_x[i * d + a] -= wz * cf[i].dlogz_dx[a] / beta;
        }
        grad_k[i] -= wz * cf[i].dlogz_dk / beta;
    }
    entropy /= beta;
    logzi /= beta;
    logd /= beta;
    let value = dv.value + entropy + logzi + logd;
    if !value.is_finite() {
        return Err(DmdError::NumericalFailure {
            iteration: 0,
            message: format!("non-finite free energy {value}"),
            iterate: Vec::new(),
        });
    }
    let param_grad_norm = projected_param_grad_norm(state, &grad_x, &grad_k);
    debug_assert_eq!(grad_c.len(), n);
    Ok(FreeEnergyReport {
        functional: obj.functional,
        value,
        interaction: dv.value,
        entropy_term: entropy,
        logzi_term: logzi,
        logd_term: logd,
        grad_c,
        grad_x,
        grad_k,
        mc_std_error: dv.std_error,
        param_grad_norm,
        stationary: param_grad_norm <= STATIONARITY_TOL,
    })
}

fn evaluate_2011(state: &SystemState, obj: &Objective) -> Result<FreeEnergyReport> {
    let beta = state.beta();
    let d = state.dim();
    let dh = d as f64 / 2.0;
    let rule = obj
        .estimator
        .panel_rule()
        .expect("checked: quadrature estimator");
    let pairs = pair_terms(state, obj.interaction, rule, PairMode::WholeSpace, true);

    let mut entropy = 0.0;
    let mut logzi = 0.0;
    let mut grad_c = pairs.dc;
    let mut grad_k = pairs.dk;
    for (i, s) in state.sites().iter().enumerate() {
        let c = s.c;
        entropy += c * c.ln() + (1.0 - c) * (1.0 - c).ln();
        let g = (beta * s.k / (2.0 * std::f64::consts::PI)).ln() - 1.0;
        logzi += dh * c * g;
        grad_c[i] += (c.ln() - (1.0 - c).ln() + dh * g) / beta;
        grad_k[i] += dh * c / (beta * s.k);
    }
    entropy /= beta;
    logzi /= beta;
    let value = pairs.value + entropy + logzi;
    let param_grad_norm = projected_param_grad_norm(state, &pairs.dx, &grad_k);
    Ok(FreeEnergyReport {
        functional: Functional::F2011,
        value,
        interaction: pairs.value,
        entropy_term: entropy,
        logzi_term: logzi,
        logd_term: 0.0,
        grad_c,
        grad_x: pairs.dx,
        grad_k,
        mc_std_error: 0.0,
        param_grad_norm,
        stationary: param_grad_norm <= STATIONARITY_TOL,
    })
}

/// `|theta - P(theta - g)|_inf` over the admissible box.
pub(crate) fn projected_param_grad_norm(state: &SystemState, gx: &[f64], gk: &[f64]) -> f64 {
    let l = state.domain().half_width();
    let d = state.dim();
    let mut norm: f64 = 0.0;
    for (i, s) in state.sites().iter().enumerate() {
        for a in 0..d {
            let x = s.x[a];
            norm = norm.max((x - (x - gx[i * d + a]).clamp(-l, l)).abs());
        }
        let k = s.k;
        norm = norm.max((k - (k - gk[i]).clamp(0.0, state.k_max())).abs());
    }
    norm
}

fn delta_v_terms(
    state: &SystemState,
    interaction: &Interaction,
    estimator: &Estimator,
    cf: &[SiteClosedForm],
    want_grad: bool,
) -> Result<DeltaVTerms> {
    match *estimator {
        Estimator::MonteCarlo { samples, seed } => {
            let batch = ensemble::sample(state, seed, samples);
            Ok(monte_carlo_terms(state, interaction, &batch, cf))
        }
        Estimator::PairQuadrature { .. } => {
            let rule = estimator.panel_rule().expect("quadrature");
            let pairs = pair_terms(state, interaction, rule, PairMode::Box, want_grad);
            Ok(subtract_vhat(state, pairs, cf))
        }
    }
}

/// Turns pair sums of `E[V]` into `E[Delta V]` with the closed-form
/// `E[V-hat]` and its derivatives.
fn subtract_vhat(state: &SystemState, pairs: PairTerms, cf: &[SiteClosedForm]) -> DeltaVTerms {
    let d = state.dim();
    let g = gated(state);
    let mut out = DeltaVTerms {
        value: pairs.value,
        dx: pairs.dx,
        dk: pairs.dk,
        dc: pairs.dc,
        std_error: 0.0,
    };
    for (i, s) in state.sites().iter().enumerate() {
        let w = if g { s.c } else { 1.0 };
        out.value -= w * cf[i].s;
        for a in 0..d {
            out.dx[i * d + a] -= w * cf[i].ds_dx[a];
        }
        out.dk[i] -= w * cf[i].ds_dk;
        if g {
            out.dc[i] -= cf[i].s;
        }
    }
    out
}

#[derive(Clone, Copy, PartialEq)]
enum PairMode {
    /// Site marginals of the approximate ensemble on the box.
    Box,
    /// `sum c_i c_j <phi>` under whole-space Gaussians.
    WholeSpace,
}

struct PairTerms {
    value: f64,
    dx: Vec<f64>,
    dk: Vec<f64>,
    dc: Vec<f64>,
}

struct PairOut {
    i: usize,
    j: usize,
    value: f64,
    dc_i: f64,
    dc_j: f64,
    kernel_grad: PairKernel,
}

/// How the true potential weights a pair in each occupancy branch.
struct Branch {
    ai: u8,
    aj: u8,
    prob: f64,
    dprob_i: f64,
    dprob_j: f64,
    weight: f64,
    dweight_i: f64,
    dweight_j: f64,
    phi: usize,
}

fn branches(state: &SystemState, interaction: &Interaction, mode: PairMode, i: usize, j: usize) -> Vec<Branch> {
    let ci = state.site(i).c;
    let cj = state.site(j).c;
    if mode == PairMode::WholeSpace {
        return vec![Branch {
            ai: 1,
            aj: 1,
            prob: 1.0,
            dprob_i: 0.0,
            dprob_j: 0.0,
            weight: ci * cj,
            dweight_i: cj,
            dweight_j: ci,
            phi: 0,
        }];
    }
    let p = |c: f64, a: u8| if a == 1 { c } else { 1.0 - c };
    let sgn = |a: u8| if a == 1 { 1.0 } else { -1.0 };
    let mut out = Vec::with_capacity(4);
    for ai in [1u8, 0] {
        for aj in [1u8, 0] {
            let (weight, dweight_i, dweight_j, phi) = match interaction {
                Interaction::Pair(_) if state.mean_field() => (ci * cj, cj, ci, 0),
                Interaction::Pair(_) => ((ai * aj) as f64, 0.0, 0.0, 0),
                Interaction::Alloy(_) => {
                    let idx = match (ai, aj) {
                        (1, 1) => 0,
                        (0, 0) => 2,
                        _ => 1,
                    };
                    (1.0, 0.0, 0.0, idx)
                }
            };
            if weight == 0.0 && dweight_i == 0.0 && dweight_j == 0.0 {
                continue;
            }
            out.push(Branch {
                ai,
                aj,
                prob: p(ci, ai) * p(cj, aj),
                dprob_i: sgn(ai) * p(cj, aj),
                dprob_j: p(ci, ai) * sgn(aj),
                weight,
                dweight_i,
                dweight_j,
                phi,
            });
        }
    }
    out
}

fn evaluators(interaction: &Interaction) -> Vec<(PairEvaluator, f64)> {
    match interaction {
        Interaction::Pair(p) => vec![(p.evaluator(), p.cutoff())],
        Interaction::Alloy(a) => [&a.aa, &a.ab, &a.bb]
            .iter()
            .map(|p| (p.evaluator(), p.cutoff()))
            .collect(),
    }
}

fn pair_terms(
    state: &SystemState,
    interaction: &Interaction,
    rule: PanelRule,
    mode: PairMode,
    want_grad: bool,
) -> PairTerms {
    let n = state.n_sites();
    let d = state.dim();
    let domain = state.domain();
    let mut out = PairTerms {
        value: 0.0,
        dx: vec![0.0; n * d],
        dk: vec![0.0; n],
        dc: vec![0.0; n],
    };
    if n < 2 || interaction.is_zero() {
        return out;
    }
    let phis = evaluators(interaction);
    let gaussian_shape = match mode {
        PairMode::Box => MarginalShape::Gaussian,
        PairMode::WholeSpace => MarginalShape::WholeSpaceGaussian,
    };
    let gaussians: Vec<SiteMarginal> = state
        .sites()
        .par_iter()
        .map(|s| SiteMarginal::build(gaussian_shape, &s.x, s.k, domain, rule))
        .collect();
    let gated_branches = mode == PairMode::Box && gated(state);
    let needs_uniform = gated_branches && (state.mean_field() || matches!(interaction, Interaction::Alloy(_)));
    let uniform = needs_uniform.then(|| {
        SiteMarginal::build(MarginalShape::Uniform, &vec![0.0; d], 0.0, domain, rule)
    });
    let marginal = |i: usize, a: u8| -> (&SiteMarginal, u8) {
        if gated_branches && a == 0 {
            (uniform.as_ref().expect("uniform marginal built"), 0)
        } else {
            (&gaussians[i], 1)
        }
    };

    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let results: Vec<PairOut> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let mut cache: Vec<((u8, u8, usize), PairKernel)> = Vec::new();
            let mut res = PairOut {
                i,
                j,
                value: 0.0,
                dc_i: 0.0,
                dc_j: 0.0,
                kernel_grad: PairKernel {
                    value: 0.0,
                    dx_i: vec![0.0; d],
                    dk_i: 0.0,
                    dx_j: vec![0.0; d],
                    dk_j: 0.0,
                },
            };
            for b in branches(state, interaction, mode, i, j) {
                let (mi, ki) = marginal(i, b.ai);
                let (mj, kj) = marginal(j, b.aj);
                let key = (ki, kj, b.phi);
                let g = match cache.iter().find(|(k, _)| *k == key) {
                    Some((_, g)) => g.clone(),
                    None => {
                        let (phi, r_cut) = &phis[b.phi];
                        let g = pair_kernel(mi, mj, phi, *r_cut, want_grad);
                        cache.push((key, g.clone()));
                        g
                    }
                };
                let pw = b.prob * b.weight;
                res.value += pw * g.value;
                res.dc_i += (b.dprob_i * b.weight + b.prob * b.dweight_i) * g.value;
                res.dc_j += (b.dprob_j * b.weight + b.prob * b.dweight_j) * g.value;
                for a in 0..d {
                    res.kernel_grad.dx_i[a] += pw * g.dx_i[a];
                    res.kernel_grad.dx_j[a] += pw * g.dx_j[a];
                }
                res.kernel_grad.dk_i += pw * g.dk_i;
                res.kernel_grad.dk_j += pw * g.dk_j;
            }
            res
        })
        .collect();

    for r in results {
        out.value += r.value;
        out.dc[r.i] += r.dc_i;
        out.dc[r.j] += r.dc_j;
        for a in 0..d {
            out.dx[r.i * d + a] += r.kernel_grad.dx_i[a];
            out.dx[r.j * d + a] += r.kernel_grad.dx_j[a];
        }
        out.dk[r.i] += r.kernel_grad.dk_i;
        out.dk[r.j] += r.kernel_grad.dk_j;
    }
    out
}

/// Per-sample `Delta V` together with the explicit `c` derivative of the
/// mean-field potential.
fn sample_terms(
    state: &SystemState,
    interaction: &Interaction,
    batch: &SampleBatch,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let n = state.n_sites();
    let d = state.dim();
    let phis = evaluators(interaction);
    let c = state.c_values();
    let mean_field = state.mean_field();
    let g = gated(state);
    let rows: Vec<(f64, Vec<f64>)> = (0..batch.n_samples)
        .into_par_iter()
        .map(|s| {
            let x = batch.positions(s);
            let a = batch.occupancy(s);
            let mut v = 0.0;
            let mut dmf = if mean_field { vec![0.0; n] } else { Vec::new() };
            for i in 0..n {
                for j in i + 1..n {
                    let phi_idx = match interaction {
                        Interaction::Pair(_) => {
                            if !mean_field && (a[i] == 0 || a[j] == 0) {
                                continue;
                            }
                            0
                        }
                        Interaction::Alloy(_) => match (a[i], a[j]) {
                            (1, 1) => 0,
                            (0, 0) => 2,
                            _ => 1,
                        },
                    };
                    let mut r2 = 0.0;
                    for k in 0..d {
                        let t = x[i * d + k] - x[j * d + k];
                        r2 += t * t;
                    }
                    let f = phis[phi_idx].0.eval_r2(r2);
                    if mean_field {
                        v += c[i] * c[j] * f;
                        dmf[i] += c[j] * f;
                        dmf[j] += c[i] * f;
                    } else {
                        v += f;
                    }
                }
            }
            let mut vhat = 0.0;
            for (i, site) in state.sites().iter().enumerate() {
                if g && a[i] == 0 {
                    continue;
                }
                let mut r2 = 0.0;
                for k in 0..d {
                    let t = x[i * d + k] - site.x[k];
                    r2 += t * t;
                }
                vhat += 0.5 * site.k * r2;
            }
            (v - vhat, dmf)
        })
        .collect();
    let mut dv = Vec::with_capacity(rows.len());
    let mut mf = mean_field.then(|| vec![0.0; n]);
    for (v, dmf) in rows {
        dv.push(v);
        if let Some(m) = mf.as_mut() {
            for i in 0..n {
                m[i] += dmf[i];
            }
        }
    }
    let ns = batch.n_samples as f64;
    if let Some(m) = mf.as_mut() {
        m.iter_mut().for_each(|v| *v /= ns);
    }
    (dv, mf)
}

/// Per-sample `Delta V = V - V-hat` for an existing batch.
pub fn delta_v_samples(state: &SystemState, interaction: &Interaction, batch: &SampleBatch) -> Vec<f64> {
    sample_terms(state, interaction, batch).0
}

fn monte_carlo_terms(
    state: &SystemState,
    interaction: &Interaction,
    batch: &SampleBatch,
    cf: &[SiteClosedForm],
) -> DeltaVTerms {
    let n = state.n_sites();
    let d = state.dim();
    let beta = state.beta();
    let g = gated(state);
    let (dv, mf) = sample_terms(state, interaction, batch);
    let ns = batch.n_samples as f64;
    let mean = dv.iter().sum::<f64>() / ns;
    let var = dv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (ns - 1.0);

    let mut dx = vec![0.0; n * d];
    let mut dk = vec![0.0; n];
    let mut dc = vec![0.0; n];
    let half_m2: Vec<f64> = cf.iter().map(|f| 0.5 * f.m2.iter().sum::<f64>()).collect();
    for s in 0..batch.n_samples {
        let x = batch.positions(s);
        let a = batch.occupancy(s);
        let centered = dv[s] - mean;
        for (i, site) in state.sites().iter().enumerate() {
            let p = beta * site.k;
            let present = !g || a[i] == 1;
            dc[i] += centered * (a[i] as f64 - site.c);
            if !present {
                continue;
            }
            let mut half_u2 = 0.0;
            for k in 0..d {
                let u = x[i * d + k] - site.x[k];
                half_u2 += 0.5 * u * u;
                // Score of the truncated Gaussian plus the pathwise term
                // of -V-hat.
                dx[i * d + k] += centered * p * (u - cf[i].m1[k]) + site.k * u;
            }
            dk[i] += centered * beta * (half_m2[i] - half_u2) - half_u2;
        }
    }
    for (i, site) in state.sites().iter().enumerate() {
        dc[i] /= ns * site.c * (1.0 - site.c);
        if let Some(m) = &mf {
            dc[i] += m[i];
        }
        dk[i] /= ns;
    }
    dx.iter_mut().for_each(|v| *v /= ns);
    DeltaVTerms {
        value: mean,
        dx,
        dk,
        dc,
        std_error: (var / ns).sqrt(),
    }
}

/// `E[Delta V]` with its standard error (Monte Carlo) or the half-resolution
/// coarse-rule difference (quadrature).
pub fn estimate_delta_v(
    state: &SystemState,
    interaction: &Interaction,
    estimator: &Estimator,
) -> Result<DeltaVEstimate> {
    interaction.validate()?;
    interaction.check_model(state.model())?;
    estimator.validate()?;
    let cf = closed_forms(state);
    let fine = delta_v_terms(state, interaction, estimator, &cf, false)?;
    let quadrature_error = match estimator.panel_rule() {
        Some(rule) => {
            let coarse = pair_terms(state, interaction, rule.coarse(), PairMode::Box, false);
            let coarse = subtract_vhat(state, coarse, &cf);
            (fine.value - coarse.value).abs()
        }
        None => 0.0,
    };
    Ok(DeltaVEstimate {
        value: fine.value,
        std_error: fine.std_error,
        quadrature_error,
    })
}

/// Half-resolution error estimate of the pair-quadrature interaction term.
pub fn interaction_quadrature_error(state: &SystemState, obj: &Objective) -> Result<f64> {
    obj.check(state)?;
    let Some(rule) = obj.estimator.panel_rule() else {
        return Ok(0.0);
    };
    let mode = if obj.functional == Functional::F2011 {
        PairMode::WholeSpace
    } else {
        PairMode::Box
    };
    let fine = pair_terms(state, obj.interaction, rule, mode, false).value;
    let coarse = pair_terms(state, obj.interaction, rule.coarse(), mode, false).value;
    Ok((fine - coarse).abs())
}

pub fn free_energy(
    state: &SystemState,
    interaction: &Interaction,
    functional: Functional,
    estimator: Estimator,
) -> Result<FreeEnergyReport> {
    Objective::new(interaction, functional, estimator).evaluate(state)
}

/// `dF-hat/dc_i` at fixed `(X, k)`. Check `stationary` on the full report
/// when the state may be away from a minimizer.
pub fn grad_c(
    state: &SystemState,
    interaction: &Interaction,
    functional: Functional,
    estimator: Estimator,
) -> Result<Vec<f64>> {
    Ok(free_energy(state, interaction, functional, estimator)?.grad_c)
}

/// `(dF/dX, dF/dk)`, with `dF/dX` flat.
pub fn grad_params(
    state: &SystemState,
    interaction: &Interaction,
    functional: Functional,
    estimator: Estimator,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let r = free_energy(state, interaction, functional, estimator)?;
    Ok((r.grad_x, r.grad_k))
}
