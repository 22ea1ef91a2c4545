//! Pair expectations `<phi(|x_i - x_j|)>` under products of site marginals.
//!
//! A marginal carries self-normalized weights on fixed lattice nodes plus
//! the per-node scores `d log w / d X` and `d log w / d k`, so a single sweep
//! over node pairs yields the expectation and its parameter gradients.

use crate::domain::ThermodynamicDomain;
use crate::potentials::PairEvaluator;
use crate::quadrature::{for_each_multi_index, lattice_rule, AxisNodes, PanelRule};

/// Gaussian weights below `exp(-WINDOW^2 / 2)` of the peak are dropped.
const WINDOW: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum MarginalShape {
    /// Truncated to the box.
    Gaussian,
    /// Whole-space Gaussian; needs `k > 0`.
    WholeSpaceGaussian,
    /// Uniform on the box.
    Uniform,
}

struct AxisMarginal {
    x: Vec<f64>,
    w: Vec<f64>,
    score_x: Vec<f64>,
    score_k: Vec<f64>,
}

fn axis_marginal(
    shape: MarginalShape,
    x0: f64,
    p: f64,
    beta: f64,
    l: f64,
    rule: PanelRule,
) -> AxisMarginal {
    let q = rule.nodes_per_panel;
    let flat = || lattice_rule(-l, l, rule.flat_width(l), q, Some((-l, l)));
    let clip = match shape {
        MarginalShape::Uniform => return uniform_on(flat()),
        MarginalShape::Gaussian if p == 0.0 => return gaussian_on(flat(), x0, 0.0, beta),
        MarginalShape::Gaussian => Some((-l, l)),
        MarginalShape::WholeSpaceGaussian => None,
    };
    let r = WINDOW / p.sqrt();
    let blend = rule.blend(l, 2.0 * r);
    let coarse = || gaussian_on(lattice_rule(x0 - r, x0 + r, blend.coarse_width, q, clip), x0, p, beta);
    if blend.fine_weight == 0.0 {
        return coarse();
    }
    let fine = gaussian_on(lattice_rule(x0 - r, x0 + r, blend.fine_width, q, clip), x0, p, beta);
    if blend.fine_weight == 1.0 {
        return fine;
    }
    // Mixture of the two rules; the weight depends on k only, through
    // d log(span) / dk = -1 / (2k).
    let t = blend.fine_weight;
    let dt_dk = -blend.dweight_dlog_span * beta / (2.0 * p);
    let mut out = coarse();
    out.w.iter_mut().for_each(|w| *w *= 1.0 - t);
    out.score_k.iter_mut().for_each(|s| *s -= dt_dk / (1.0 - t));
    out.x.extend(fine.x);
    out.w.extend(fine.w.iter().map(|w| w * t));
    out.score_x.extend(fine.score_x);
    out.score_k.extend(fine.score_k.iter().map(|s| s + dt_dk / t));
    out
}

fn uniform_on(nodes: AxisNodes) -> AxisMarginal {
    let n = nodes.len();
    let total: f64 = nodes.w.iter().sum();
    AxisMarginal {
        x: nodes.x,
        w: nodes.w.iter().map(|w| w / total).collect(),
        score_x: vec![0.0; n],
        score_k: vec![0.0; n],
    }
}

/// Self-normalized weights of `exp(-p u^2 / 2)`, `u = x - x0`, on `nodes`.
fn gaussian_on(nodes: AxisNodes, x0: f64, p: f64, beta: f64) -> AxisMarginal {
    let mut w: Vec<f64> = nodes
        .x
        .iter()
        .zip(&nodes.w)
        .map(|(&x, &wq)| wq * (-0.5 * p * (x - x0) * (x - x0)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    let mean_u: f64 = nodes.x.iter().zip(&w).map(|(x, w)| w * (x - x0)).sum();
    let mean_half_u2: f64 = nodes
        .x
        .iter()
        .zip(&w)
        .map(|(x, w)| w * 0.5 * (x - x0) * (x - x0))
        .sum();
    let score_x = nodes.x.iter().map(|x| p * ((x - x0) - mean_u)).collect();
    let score_k = nodes
        .x
        .iter()
        .map(|x| beta * (mean_half_u2 - 0.5 * (x - x0) * (x - x0)))
        .collect();
    AxisMarginal {
        x: nodes.x,
        w,
        score_x,
        score_k,
    }
}

/// Tensor-product marginal of one site. Coordinates are stored flat.
#[derive(Clone, Debug)]
pub(crate) struct SiteMarginal {
    pub dim: usize,
    pub pts: Vec<f64>,
    pub w: Vec<f64>,
    pub score_x: Vec<f64>,
    pub score_k: Vec<f64>,
    /// Axis-aligned bounding box of the nodes, `[lo, hi]` per axis.
    pub bounds: Vec<(f64, f64)>,
    pub has_params: bool,
}

impl SiteMarginal {
    pub fn build(
        shape: MarginalShape,
        x: &[f64],
        k: f64,
        domain: &ThermodynamicDomain,
        rule: PanelRule,
    ) -> Self {
        let beta = domain.beta();
        let p = beta * k;
        let l = domain.half_width();
        let dim = x.len();
        let axes: Vec<AxisMarginal> = x
            .iter()
            .map(|&x0| axis_marginal(shape, x0, p, beta, l, rule))
            .collect();
        let bounds = axes
            .iter()
            .map(|a| {
                let lo = a.x.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = a.x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            })
            .collect();
        let sizes: Vec<usize> = axes.iter().map(|a| a.x.len()).collect();
        let total: usize = sizes.iter().product();
        let mut out = SiteMarginal {
            dim,
            pts: Vec::with_capacity(total * dim),
            w: Vec::with_capacity(total),
            score_x: Vec::with_capacity(total * dim),
            score_k: Vec::with_capacity(total),
            bounds,
            has_params: shape != MarginalShape::Uniform,
        };
        for_each_multi_index(&sizes, |idx| {
            let mut w = 1.0;
            let mut sk = 0.0;
            for (a, &i) in idx.iter().enumerate() {
                out.pts.push(axes[a].x[i]);
                out.score_x.push(axes[a].score_x[i]);
                w *= axes[a].w[i];
                sk += axes[a].score_k[i];
            }
            out.w.push(w);
            out.score_k.push(sk);
        });
        out
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    /// Smallest possible distance between nodes of two marginals.
    pub fn gap(&self, other: &SiteMarginal) -> f64 {
        self.bounds
            .iter()
            .zip(&other.bounds)
            .map(|(&(a0, a1), &(b0, b1))| {
                let g = (b0 - a1).max(a0 - b1).max(0.0);
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Expectation and parameter gradients of a pair term.
#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct PairKernel {
    pub value: f64,
    pub dx_i: Vec<f64>,
    pub dk_i: f64,
    pub dx_j: Vec<f64>,
    pub dk_j: f64,
}

impl PairKernel {
    fn zero(dim: usize) -> Self {
        Self {
            value: 0.0,
            dx_i: vec![0.0; dim],
            dk_i: 0.0,
            dx_j: vec![0.0; dim],
            dk_j: 0.0,
        }
    }
}

pub(crate) fn pair_kernel(
    mi: &SiteMarginal,
    mj: &SiteMarginal,
    phi: &PairEvaluator,
    r_cut: f64,
    want_grad: bool,
) -> PairKernel {
    let dim = mi.dim;
    let mut out = PairKernel::zero(dim);
    if phi.is_zero() || mi.gap(mj) >= r_cut {
        return out;
    }
    let nj = mj.len();
    let mut psi = vec![0.0; nj];
    for p in 0..mi.len() {
        let xp = &mi.pts[p * dim..(p + 1) * dim];
        let wp = mi.w[p];
        let mut phi_p = 0.0;
        for q in 0..nj {
            let yq = &mj.pts[q * dim..(q + 1) * dim];
            let mut r2 = 0.0;
            for a in 0..dim {
                let t = xp[a] - yq[a];
                r2 += t * t;
            }
            let f = phi.eval_r2(r2);
            phi_p += mj.w[q] * f;
            psi[q] += wp * f;
        }
        out.value += wp * phi_p;
        if want_grad && mi.has_params {
            for a in 0..dim {
                out.dx_i[a] += wp * mi.score_x[p * dim + a] * phi_p;
            }
            out.dk_i += wp * mi.score_k[p] * phi_p;
        }
    }
    if want_grad && mj.has_params {
        for q in 0..nj {
            let f = mj.w[q] * psi[q];
            for a in 0..dim {
                out.dx_j[a] += mj.score_x[q * dim + a] * f;
            }
            out.dk_j += mj.score_k[q] * f;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::PairPotentialSpec;
    use approx::assert_abs_diff_eq;

    fn domain(l: f64) -> ThermodynamicDomain {
        ThermodynamicDomain::new(1.0, 1, l).unwrap()
    }

    #[test]
    fn harmonic_pair_matches_moments() {
        // <(x - y)^2> for independent whole-space Gaussians is
        // (X - Y)^2 + 1/(beta k_i) + 1/(beta k_j).
        let d = domain(20.0);
        let rule = PanelRule::from_order(64, Some(0.5));
        let mi = SiteMarginal::build(MarginalShape::Gaussian, &[0.3], 2.0, &d, rule);
        let mj = SiteMarginal::build(MarginalShape::Gaussian, &[-0.4], 3.0, &d, rule);
        let phi = PairPotentialSpec::harmonic_bond(2.0, 0.0, None, false).evaluator();
        let k = pair_kernel(&mi, &mj, &phi, f64::INFINITY, true);
        let expected = 0.7f64.powi(2) + 0.5 + 1.0 / 3.0;
        assert_abs_diff_eq!(k.value, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(k.dx_i[0], 2.0 * 0.7, epsilon = 1e-10);
        assert_abs_diff_eq!(k.dx_j[0], -2.0 * 0.7, epsilon = 1e-10);
        assert_abs_diff_eq!(k.dk_i, -1.0 / 4.0, epsilon = 1e-10);
        assert_abs_diff_eq!(k.dk_j, -1.0 / 9.0, epsilon = 1e-10);

        // The adaptive width puts about one panel per standard deviation.
        let rule = PanelRule::from_order(64, None);
        let mi = SiteMarginal::build(MarginalShape::Gaussian, &[0.3], 2.0, &d, rule);
        let mj = SiteMarginal::build(MarginalShape::Gaussian, &[-0.4], 3.0, &d, rule);
        let k = pair_kernel(&mi, &mj, &phi, f64::INFINITY, false);
        assert_abs_diff_eq!(k.value, expected, epsilon = 1e-9);
    }

    #[test]
    fn weights_are_normalized() {
        let d = ThermodynamicDomain::new(2.0, 2, 1.5).unwrap();
        let rule = PanelRule::from_order(16, None);
        for shape in [MarginalShape::Gaussian, MarginalShape::Uniform] {
            let m = SiteMarginal::build(shape, &[0.2, -1.4], 3.0, &d, rule);
            assert_abs_diff_eq!(m.w.iter().sum::<f64>(), 1.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn separated_supports_are_skipped() {
        let d = domain(10.0);
        let rule = PanelRule::from_order(8, Some(0.5));
        let mi = SiteMarginal::build(MarginalShape::Gaussian, &[-8.0], 10.0, &d, rule);
        let mj = SiteMarginal::build(MarginalShape::Gaussian, &[8.0], 10.0, &d, rule);
        let phi = PairPotentialSpec::lennard_jones(1.0, 1.0, Some(2.5), true).evaluator();
        assert_eq!(pair_kernel(&mi, &mj, &phi, 2.5, true).value, 0.0);
    }

    #[test]
    fn blended_rule_is_smooth_in_k() {
        // Seven-wide half box, four panels per window: the panel count is
        // 3.5 sqrt(k), so k = 9.3 sits inside a blend.
        let d = domain(7.0);
        let rule = PanelRule::from_order(16, None);
        let phi = PairPotentialSpec::morse(1.0, 1.0, 1.5, None, false).evaluator();
        let value = |k: f64| {
            let mi = SiteMarginal::build(MarginalShape::Gaussian, &[0.1], k, &d, rule);
            let mj = SiteMarginal::build(MarginalShape::Gaussian, &[1.2], 4.0, &d, rule);
            pair_kernel(&mi, &mj, &phi, f64::INFINITY, true)
        };
        let k0 = 9.3;
        let h = 1e-5;
        let fd = (value(k0 + h).value - value(k0 - h).value) / (2.0 * h);
        assert_abs_diff_eq!(value(k0).dk_i, fd, epsilon = 1e-8);
        // No jump where the panel count crosses 10.
        let kc = (10.0f64 / 3.5).powi(2);
        let jump = value(kc * (1.0 + 1e-10)).value - value(kc * (1.0 - 1e-10)).value;
        assert!(jump.abs() < 1e-9, "{jump}");
    }
}
