//! Closed-form quantities of the approximate ensemble and an exact sampler.
//!
//! Each site's Gaussian factorizes over axes of the box, so everything
//! reduces to the moments `M_n = int_{u1}^{u2} u^n exp(-p u^2 / 2) du` with
//! `u = x - X` and `p = beta k`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use libm::{erf, erfc};
use statrs::function::erf::erfc_inv;

use crate::domain::{clamp_occupancy, HarmonicVariant, OccupancyVector, SystemState, ThermodynamicDomain};
use crate::error::{DmdError, Result};

/// Relative tolerance of the two partition-function forms.
pub const PARTITION_RTOL: f64 = 1e-10;

/// Box moments `M_0..M_4` of the weight `exp(-p u^2 / 2)` on `[u1, u2]`.
pub fn axis_moments(p: f64, u1: f64, u2: f64) -> [f64; 5] {
    let umax2 = (u1 * u1).max(u2 * u2);
    let mut m = [0.0; 5];
    if p == 0.0 {
        for (n, mn) in m.iter_mut().enumerate() {
            let e = n as i32 + 1;
            *mn = (u2.powi(e) - u1.powi(e)) / e as f64;
        }
        return m;
    }
    if 0.5 * p * umax2 <= 1.0 {
        // Alternating Taylor series; every term shrinks by at least 1/j.
        let (r1, r2) = (-0.5 * p * u1 * u1, -0.5 * p * u2 * u2);
        for (n, mn) in m.iter_mut().enumerate() {
            let mut a1 = u1.powi(n as i32 + 1);
            let mut a2 = u2.powi(n as i32 + 1);
            let mut sum = 0.0;
            for j in 0..80 {
                let term = (a2 - a1) / (n + 2 * j + 1) as f64;
                sum += term;
                if j > 2 && term.abs() <= 1e-18 * sum.abs() {
                    break;
                }
                let jf = j as f64 + 1.0;
                a1 *= r1 / jf;
                a2 *= r2 / jf;
            }
            *mn = sum;
        }
        return m;
    }
    let s = (0.5 * p).sqrt();
    let e1 = (-0.5 * p * u1 * u1).exp();
    let e2 = (-0.5 * p * u2 * u2).exp();
    m[0] = (std::f64::consts::PI / (2.0 * p)).sqrt() * erf_difference(s * u1, s * u2);
    m[1] = (e1 - e2) / p;
    for n in 2..5 {
        let k = n as i32 - 1;
        m[n] = (u1.powi(k) * e1 - u2.powi(k) * e2 + (n as f64 - 1.0) * m[n - 2]) / p;
    }
    m
}

/// `erf(b) - erf(a)` without cancellation in the tails.
fn erf_difference(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        erfc(a) - erfc(b)
    } else if b <= 0.0 {
        erfc(-b) - erfc(-a)
    } else {
        erf(b) - erf(a)
    }
}

/// Per-site closed forms and their parameter derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteClosedForm {
    pub z: f64,
    pub log_z: f64,
    /// Normalized first moment of `x - X` per axis.
    pub m1: Vec<f64>,
    /// Normalized second moment of `x - X` per axis.
    pub m2: Vec<f64>,
    /// `E[k/2 |x - X|^2]` under the site Gaussian.
    pub s: f64,
    pub dlogz_dx: Vec<f64>,
    pub dlogz_dk: f64,
    pub ds_dx: Vec<f64>,
    pub ds_dk: f64,
}

pub fn site_closed_form(domain: &ThermodynamicDomain, x: &[f64], k: f64) -> SiteClosedForm {
    let beta = domain.beta();
    let l = domain.half_width();
    let p = beta * k;
    let d = x.len();
    let mut out = SiteClosedForm {
        z: 1.0,
        log_z: 0.0,
        m1: vec![0.0; d],
        m2: vec![0.0; d],
        s: 0.0,
        dlogz_dx: vec![0.0; d],
        dlogz_dk: 0.0,
        ds_dx: vec![0.0; d],
        ds_dk: 0.0,
    };
    let mut sum_m2 = 0.0;
    let mut dsum_m2_dp = 0.0;
    for (a, &xa) in x.iter().enumerate() {
        let mm = axis_moments(p, -l - xa, l - xa);
        let n: Vec<f64> = mm.iter().map(|v| v / mm[0]).collect();
        out.log_z += mm[0].ln();
        out.m1[a] = n[1];
        out.m2[a] = n[2];
        out.dlogz_dx[a] = p * n[1];
        sum_m2 += n[2];
        dsum_m2_dp += -(n[4] - n[2] * n[2]) / 2.0;
        let dm2_dx = -2.0 * n[1] + p * (n[3] - n[2] * n[1]);
        out.ds_dx[a] = 0.5 * k * dm2_dx;
    }
    out.z = out.log_z.exp();
    out.dlogz_dk = -0.5 * beta * sum_m2;
    out.s = 0.5 * k * sum_m2;
    out.ds_dk = 0.5 * sum_m2 + 0.5 * k * beta * dsum_m2_dp;
    out
}

pub(crate) fn single_site_z_unchecked(domain: &ThermodynamicDomain, x: &[f64], k: f64) -> f64 {
    let l = domain.half_width();
    let p = domain.beta() * k;
    x.iter().map(|&xa| axis_moments(p, -l - xa, l - xa)[0]).product()
}

/// `int_D exp(-beta k / 2 |x - X|^2) dx`.
pub fn single_site_z(domain: &ThermodynamicDomain, x: &[f64], k: f64) -> Result<f64> {
    if !domain.contains(x) {
        return Err(DmdError::OutsideDomain { site: 0 });
    }
    if !(k >= 0.0) {
        return Err(DmdError::InvalidParameter(format!("stiffness must be >= 0, got {k}")));
    }
    Ok(single_site_z_unchecked(domain, x, k))
}

/// Which closed form of the chemical potential applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChemicalPotentialForm {
    Vacancy,
    Binary,
    MeanField,
}

pub fn chemical_potential(
    domain: &ThermodynamicDomain,
    c: f64,
    z: f64,
    form: ChemicalPotentialForm,
) -> Result<f64> {
    if !(z > 0.0) {
        return Err(DmdError::InvalidParameter(format!("Z_i must be positive, got {z}")));
    }
    let c = clamp_occupancy(c);
    let logit = (c / (1.0 - c)).ln();
    Ok(match form {
        ChemicalPotentialForm::Vacancy => (logit + domain.log_volume() - z.ln()) / domain.beta(),
        _ => logit / domain.beta(),
    })
}

pub(crate) fn mu_hat_for(domain: &ThermodynamicDomain, c: f64, z: f64, variant: HarmonicVariant) -> f64 {
    let logit = c.ln() - (1.0 - c).ln();
    match variant {
        HarmonicVariant::Gated => (logit + domain.log_volume() - z.ln()) / domain.beta(),
        HarmonicVariant::AlwaysOn => logit / domain.beta(),
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

pub(crate) fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn check_agreement(a: f64, b: f64, what: &str) -> Result<()> {
    let scale = a.abs().max(b.abs()).max(1.0);
    if (a - b).abs() > PARTITION_RTOL * scale || !a.is_finite() {
        return Err(DmdError::Consistency(format!(
            "{what}: partition forms disagree ({a:?} vs {b:?})"
        )));
    }
    Ok(())
}

/// Both evaluations of `log Z-hat`, from the cached chemical potentials and
/// from the occupancies alone.
pub fn partition_hat_forms(state: &SystemState) -> (f64, f64) {
    let d = state.domain();
    let beta = d.beta();
    let log_vol = d.log_volume();
    let mut from_mu = 0.0;
    let mut from_c = 0.0;
    for s in state.sites() {
        match state.variant() {
            HarmonicVariant::Gated => {
                from_mu += log_vol + softplus(beta * s.mu_hat + s.z.ln() - log_vol);
                from_c += log_vol - (1.0 - s.c).ln();
            }
            HarmonicVariant::AlwaysOn => {
                from_mu += softplus(beta * s.mu_hat) + s.z.ln();
                from_c += -(1.0 - s.c).ln() + s.z.ln();
            }
        }
    }
    (from_mu, from_c)
}

/// `log Z-hat`, after checking that both forms agree.
pub fn log_partition_hat(state: &SystemState) -> Result<f64> {
    let (a, b) = partition_hat_forms(state);
    check_agreement(a, b, "log Z-hat")?;
    Ok(a)
}

/// `E[a_i]` under the approximate ensemble, from the cached values.
pub fn occupancy_expectation(state: &SystemState, i: usize) -> f64 {
    let s = state.site(i);
    let d = state.domain();
    match state.variant() {
        HarmonicVariant::Gated => logistic(d.beta() * s.mu_hat + s.z.ln() - d.log_volume()),
        HarmonicVariant::AlwaysOn => logistic(d.beta() * s.mu_hat),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteMoments {
    pub z: f64,
    pub mu_hat: f64,
    pub gmean: Vec<f64>,
    pub mean_pos: Vec<f64>,
    pub weighted_mean_pos: Vec<f64>,
    pub vhat_site: f64,
}

pub fn site_moments(state: &SystemState, i: usize) -> SiteMoments {
    let s = state.site(i);
    let cf = site_closed_form(state.domain(), &s.x, s.k);
    let gmean: Vec<f64> = s.x.iter().zip(&cf.m1).map(|(x, m)| x + m).collect();
    let (mean_pos, vhat_site) = match state.variant() {
        // An empty site is uniform on D, whose centroid is the origin.
        HarmonicVariant::Gated => (gmean.iter().map(|g| s.c * g).collect(), s.c * cf.s),
        HarmonicVariant::AlwaysOn => (gmean.clone(), cf.s),
    };
    SiteMoments {
        z: s.z,
        mu_hat: s.mu_hat,
        weighted_mean_pos: gmean.clone(),
        gmean,
        mean_pos,
        vhat_site,
    }
}

/// `E[V-hat]` under the approximate ensemble.
pub fn expected_vhat(state: &SystemState) -> f64 {
    (0..state.n_sites()).map(|i| site_moments(state, i).vhat_site).sum()
}

/// Draws from the approximate ensemble, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub n_samples: usize,
    pub n_sites: usize,
    pub dim: usize,
    /// `x[(s * n_sites + i) * dim + axis]`.
    pub x: Vec<f64>,
    /// `a[s * n_sites + i]`.
    pub a: Vec<u8>,
}

impl SampleBatch {
    pub fn positions(&self, s: usize) -> &[f64] {
        let w = self.n_sites * self.dim;
        &self.x[s * w..(s + 1) * w]
    }

    pub fn occupancy(&self, s: usize) -> &[u8] {
        &self.a[s * self.n_sites..(s + 1) * self.n_sites]
    }

    pub fn occupancy_vector(&self, s: usize) -> OccupancyVector {
        OccupancyVector::new(self.occupancy(s).to_vec()).expect("sampler emits 0/1")
    }
}

fn uniform01(rng: &mut ChaCha8Rng) -> f64 {
    // 53 random bits in (0, 1).
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

fn std_normal_cdf(t: f64) -> f64 {
    0.5 * erfc(-t / std::f64::consts::SQRT_2)
}

fn std_normal_inv(q: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * q)
}

/// Inverse-CDF draw from `N(x0, sigma^2)` truncated to `[-l, l]`.
pub(crate) fn truncated_normal(x0: f64, sigma: f64, l: f64, u: f64) -> f64 {
    let lo = (-l - x0) / sigma;
    let hi = (l - x0) / sigma;
    // Work in the lower tail, where the CDF keeps its precision.
    let (lo, hi, sign) = if lo.abs() > hi.abs() {
        (lo, hi, 1.0)
    } else {
        (-hi, -lo, -1.0)
    };
    let f_lo = std_normal_cdf(lo);
    let f_hi = std_normal_cdf(hi);
    let t = std_normal_inv(f_lo + u * (f_hi - f_lo)).clamp(lo, hi);
    (x0 + sign * sigma * t).clamp(-l, l)
}

/// Independent draws per site. Site `i` reads stream `i` of a ChaCha8
/// generator seeded with `seed`, at a word offset fixed by the draw index,
/// so results do not depend on how the work is split across threads.
pub fn sample(state: &SystemState, seed: u64, n: usize) -> SampleBatch {
    let n_sites = state.n_sites();
    let dim = state.dim();
    let beta = state.beta();
    let l = state.domain().half_width();
    let gated = state.variant() == HarmonicVariant::Gated;
    let words_per_draw = 2 * (dim as u128 + 1);

    let per_site: Vec<(Vec<f64>, Vec<u8>)> = (0..n_sites)
        .into_par_iter()
        .map(|i| {
            let site = state.site(i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut xs = Vec::with_capacity(n * dim);
            let mut occ = Vec::with_capacity(n);
            for draw in 0..n {
                rng.set_word_pos(draw as u128 * words_per_draw);
                let a = u8::from(uniform01(&mut rng) < site.c);
                occ.push(a);
                let gaussian = site.k > 0.0 && (a == 1 || !gated);
                let sigma = if site.k > 0.0 { 1.0 / (beta * site.k).sqrt() } else { 0.0 };
                for &x0 in &site.x {
                    let u = uniform01(&mut rng);
                    let x = if gaussian {
                        truncated_normal(x0, sigma, l, u)
                    } else {
                        -l + 2.0 * l * u
                    };
                    xs.push(x);
                }
            }
            (xs, occ)
        })
        .collect();

    let mut batch = SampleBatch {
        n_samples: n,
        n_sites,
        dim,
        x: vec![0.0; n * n_sites * dim],
        a: vec![0; n * n_sites],
    };
    for (i, (xs, occ)) in per_site.into_iter().enumerate() {
        for s in 0..n {
            batch.a[s * n_sites + i] = occ[s];
            let dst = (s * n_sites + i) * dim;
            batch.x[dst..dst + dim].copy_from_slice(&xs[s * dim..(s + 1) * dim]);
        }
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Model;
    use crate::quadrature::composite;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn one_site(beta: f64, l: f64, x: f64, k: f64, c: f64, variant: HarmonicVariant) -> SystemState {
        let d = ThermodynamicDomain::new(beta, 1, l).unwrap();
        SystemState::new(d, vec![(vec![x], k, c)], vec![vec![]], Model::Vacancy, variant, false)
            .unwrap()
    }

    fn numeric_moments(p: f64, u1: f64, u2: f64) -> [f64; 5] {
        let r = composite(u1, u2, 200, 10);
        let mut m = [0.0; 5];
        for (n, mn) in m.iter_mut().enumerate() {
            *mn = r.integrate(|u| u.powi(n as i32) * (-0.5 * p * u * u).exp());
        }
        m
    }

    #[test]
    fn moments_match_quadrature_across_regimes() {
        for &p in &[0.0, 1e-8, 0.3, 1.9, 2.1, 7.0, 50.0, 1e4] {
            for &(u1, u2) in &[(-1.0, 1.0), (-0.2, 1.7), (-2.0, 0.0), (-0.5, 0.5)] {
                let got = axis_moments(p, u1, u2);
                let want = numeric_moments(p, u1, u2);
                for n in 0..5 {
                    let tol = 1e-13 * want[0].max(1e-3);
                    assert!((got[n] - want[n]).abs() <= tol, "p={p} [{u1},{u2}] n={n}: {} vs {}", got[n], want[n]);
                }
            }
        }
    }

    #[test]
    fn z_examples() {
        let d = ThermodynamicDomain::new(1.0, 1, 1.0).unwrap();
        assert_eq!(single_site_z(&d, &[0.0], 0.0).unwrap(), 2.0);
        // int_{-1}^{1} exp(-x^2) dx by an independent rule.
        let reference = composite(-1.0, 1.0, 50, 10).integrate(|x| (-x * x).exp());
        assert_abs_diff_eq!(single_site_z(&d, &[0.0], 2.0).unwrap(), reference, epsilon = 1e-14);
        assert_abs_diff_eq!(reference, 1.493648265624854, epsilon = 1e-12);
        let big = ThermodynamicDomain::new(1.0, 1, 40.0).unwrap();
        assert_abs_diff_eq!(
            single_site_z(&big, &[0.0], 2.0).unwrap(),
            std::f64::consts::PI.sqrt(),
            epsilon = 1e-14
        );
        assert!(single_site_z(&d, &[1.5], 1.0).is_err());
    }

    #[test]
    fn chemical_potential_examples() {
        let d = ThermodynamicDomain::new(1.0, 1, 1.0).unwrap();
        assert_eq!(chemical_potential(&d, 0.5, 1.3, ChemicalPotentialForm::Binary).unwrap(), 0.0);
        assert_abs_diff_eq!(
            chemical_potential(&d, 0.5, 2.0, ChemicalPotentialForm::Vacancy).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        let z = single_site_z(&d, &[0.0], 2.0).unwrap();
        assert_abs_diff_eq!(
            chemical_potential(&d, 0.5, z, ChemicalPotentialForm::Vacancy).unwrap(),
            (2.0 / 1.493648265624854f64).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn partition_examples() {
        let s = one_site(1.0, 1.0, 0.0, 1.0, 0.5, HarmonicVariant::Gated);
        assert_abs_diff_eq!(log_partition_hat(&s).unwrap(), 4f64.ln(), epsilon = 1e-14);
        let d = ThermodynamicDomain::new(1.0, 1, 1.0).unwrap();
        let b = SystemState::new(
            d,
            vec![(vec![0.0], 2.0, 0.5)],
            vec![vec![]],
            Model::Binary,
            HarmonicVariant::AlwaysOn,
            false,
        )
        .unwrap();
        assert_abs_diff_eq!(
            log_partition_hat(&b).unwrap(),
            (2.0 * 1.493648265624854f64).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn corrupted_cache_is_detected() {
        let mut s = one_site(1.0, 1.0, 0.2, 1.0, 0.3, HarmonicVariant::Gated);
        assert!(log_partition_hat(&s).is_ok());
        let mu = s.site(0).mu_hat;
        s.corrupt_mu_hat(0, mu + 0.1);
        assert!(matches!(log_partition_hat(&s), Err(DmdError::Consistency(_))));
    }

    #[test]
    fn occupancy_examples() {
        let s = one_site(1.0, 1.0, 0.4, 3.0, 0.3, HarmonicVariant::Gated);
        assert_abs_diff_eq!(occupancy_expectation(&s, 0), 0.3, epsilon = 1e-12);
        // Flat site so that |D| = Z_i, then shift mu-hat by log 2.
        let mut f = one_site(1.0, 1.0, 0.0, 0.0, 0.5, HarmonicVariant::Gated);
        assert_abs_diff_eq!(f.site(0).mu_hat, 0.0, epsilon = 1e-15);
        f.corrupt_mu_hat(0, 2f64.ln());
        assert_abs_diff_eq!(occupancy_expectation(&f, 0), 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn moments_examples() {
        let s = one_site(1.0, 1.0, 0.0, 2.0, 0.4, HarmonicVariant::Gated);
        let m = site_moments(&s, 0);
        assert_eq!(m.mean_pos[0], 0.0);
        assert_eq!(m.weighted_mean_pos[0], 0.0);
        let far = one_site(1.3, 60.0, 0.7, 2.0, 0.4, HarmonicVariant::Gated);
        let m = site_moments(&far, 0);
        assert_abs_diff_eq!(m.weighted_mean_pos[0], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(m.vhat_site, 0.4 * 0.5 / 1.3, epsilon = 1e-12);
        assert_abs_diff_eq!(m.mean_pos[0], 0.4 * 0.7, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_gradients_match_differences() {
        let d = ThermodynamicDomain::new(1.7, 2, 1.2).unwrap();
        for &(x, k) in &[([0.3, -0.9], 0.7), ([1.1, 0.0], 4.0), ([0.0, 0.2], 1e-8), ([-0.5, 0.5], 30.0)] {
            let cf = site_closed_form(&d, &x, k);
            let h = 1e-6;
            for a in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[a] += h;
                xm[a] -= h;
                let (p, m) = (site_closed_form(&d, &xp, k), site_closed_form(&d, &xm, k));
                assert_abs_diff_eq!(cf.dlogz_dx[a], (p.log_z - m.log_z) / (2.0 * h), epsilon = 1e-7);
                assert_abs_diff_eq!(cf.ds_dx[a], (p.s - m.s) / (2.0 * h), epsilon = 1e-7);
            }
            let hk = 1e-6 * k.max(1e-3);
            let (p, m) = (site_closed_form(&d, &x, k + hk), site_closed_form(&d, &x, (k - hk).max(0.0)));
            let span = k + hk - (k - hk).max(0.0);
            assert_abs_diff_eq!(cf.dlogz_dk, (p.log_z - m.log_z) / span, epsilon = 1e-6);
            assert_abs_diff_eq!(cf.ds_dk, (p.s - m.s) / span, epsilon = 1e-6);
        }
    }

    #[test]
    fn sampler_marginals() {
        let d = ThermodynamicDomain::new(1.0, 1, 1.0).unwrap();
        let st = SystemState::new(
            d,
            vec![(vec![0.3], 2.0, 0.3), (vec![-0.2], 5.0, 1e-9)],
            vec![vec![1], vec![0]],
            Model::Vacancy,
            HarmonicVariant::Gated,
            false,
        )
        .unwrap();
        let n = 100_000;
        let b = sample(&st, 7, n);
        let mean_a = (0..n).map(|s| b.occupancy(s)[0] as f64).sum::<f64>() / n as f64;
        let tol = 3.0 * (0.3f64 * 0.7 / n as f64).sqrt();
        assert!((mean_a - 0.3).abs() < tol, "{mean_a}");

        // Kolmogorov-Smirnov against Uniform(-1, 1) for the empty site.
        let mut xs: Vec<f64> = (0..n).map(|s| b.positions(s)[1]).collect();
        xs.sort_by(f64::total_cmp);
        let ks = xs
            .iter()
            .enumerate()
            .map(|(r, &x)| {
                let f = (x + 1.0) / 2.0;
                (f - r as f64 / n as f64).abs().max((f - (r + 1) as f64 / n as f64).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 1.63 / (n as f64).sqrt(), "KS {ks}");

        let occupied: Vec<f64> = (0..n)
            .filter(|&s| b.occupancy(s)[0] == 1)
            .map(|s| b.positions(s)[0])
            .collect();
        let m = occupied.iter().sum::<f64>() / occupied.len() as f64;
        let var = occupied.iter().map(|x| (x - m).powi(2)).sum::<f64>() / occupied.len() as f64;
        let se = (var / occupied.len() as f64).sqrt();
        let g = site_moments(&st, 0).gmean[0];
        assert!((m - g).abs() < 3.0 * se, "{m} vs {g}");
    }

    #[test]
    fn sampler_is_thread_invariant() {
        let d = ThermodynamicDomain::new(1.0, 2, 1.0).unwrap();
        let st = SystemState::new(
            d,
            (0..4).map(|i| (vec![0.1 * i as f64, -0.1], 1.0 + i as f64, 0.4)).collect(),
            vec![vec![1], vec![0, 2], vec![1, 3], vec![2]],
            Model::Vacancy,
            HarmonicVariant::Gated,
            false,
        )
        .unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| sample(&st, 11, 500));
        let b = four.install(|| sample(&st, 11, 500));
        assert_eq!(a, b);
        // A prefix of a longer run is the shorter run.
        let c = sample(&st, 11, 800);
        assert_eq!(&c.x[..a.x.len()], &a.x[..]);
    }

    #[test]
    fn truncated_normal_stays_inside() {
        for &x0 in &[-1.0, -0.99, 0.0, 0.5, 1.0] {
            for &u in &[1e-12, 0.3, 0.5, 0.999999] {
                let x = truncated_normal(x0, 1e-3, 1.0, u);
                assert!((-1.0..=1.0).contains(&x));
            }
        }
    }

    proptest! {
        #[test]
        fn partition_forms_agree(
            x in -1.0f64..1.0,
            y in -1.0f64..1.0,
            k1 in 0.0f64..50.0,
            k2 in 0.0f64..50.0,
            c1 in 1e-6f64..0.999999,
            c2 in 1e-6f64..0.999999,
            l in 1.0f64..4.0,
        ) {
            let d = ThermodynamicDomain::new(0.7, 2, l).unwrap();
            let st = SystemState::new(
                d,
                vec![(vec![x, y], k1, c1), (vec![y, x], k2, c2)],
                vec![vec![1], vec![0]],
                Model::Vacancy,
                HarmonicVariant::Gated,
                false,
            ).unwrap();
            let (a, b) = partition_hat_forms(&st);
            prop_assert!((a - b).abs() <= PARTITION_RTOL * a.abs().max(1.0));
            prop_assert!((occupancy_expectation(&st, 0) - st.site(0).c).abs() < 1e-12);
            prop_assert!((occupancy_expectation(&st, 1) - st.site(1).c).abs() < 1e-12);
        }

        #[test]
        fn z_monotone(x in -1.0f64..1.0, k in 0.0f64..20.0, dk in 0.01f64..5.0, dl in 0.01f64..2.0) {
            let d = ThermodynamicDomain::new(1.0, 1, 1.0).unwrap();
            let z = single_site_z(&d, &[x], k).unwrap();
            prop_assert!(z <= d.volume());
            prop_assert!(single_site_z(&d, &[x], k + dk).unwrap() < z);
            let wider = d.with_half_width(1.0 + dl).unwrap();
            prop_assert!(single_site_z(&wider, &[x], k).unwrap() > z);
        }

        #[test]
        fn mean_pos_decomposition(x in -1.0f64..1.0, k in 0.0f64..20.0, c in 0.01f64..0.99) {
            let s = one_site(1.0, 1.0, x, k, c, HarmonicVariant::Gated);
            let m = site_moments(&s, 0);
            prop_assert!((m.mean_pos[0] - c * m.weighted_mean_pos[0]).abs() < 1e-15);
            prop_assert!(m.weighted_mean_pos[0].abs() <= 1.0 + 1e-12);
        }
    }
}
