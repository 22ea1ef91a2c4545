//! Gauss-Legendre rules and the panel lattices built from them.
//!
//! Pair expectations use a composite rule whose panel edges sit at integer
//! multiples of a fixed width, clipped to the box. Node positions therefore
//! never move with the Gaussian parameters; only the weights do, which makes
//! parameter gradients exact derivatives of the discrete rule.

use std::f64::consts::PI;

/// Nodes and weights of the `n`-point rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "Gauss-Legendre order must be positive");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// One-dimensional point set with weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AxisNodes {
    pub x: Vec<f64>,
    pub w: Vec<f64>,
}

impl AxisNodes {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.x.iter().zip(&self.w).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// `q`-point rule on each of `panels` equal panels of `[a, b]`.
pub fn composite(a: f64, b: f64, panels: usize, q: usize) -> AxisNodes {
    let (gx, gw) = gauss_legendre(q);
    let h = (b - a) / panels as f64;
    let mut out = AxisNodes::default();
    for p in 0..panels {
        let lo = a + p as f64 * h;
        push_panel(&mut out, lo, lo + h, &gx, &gw);
    }
    out
}

fn push_panel(out: &mut AxisNodes, lo: f64, hi: f64, gx: &[f64], gw: &[f64]) {
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    for (x, w) in gx.iter().zip(gw) {
        out.x.push(mid + half * x);
        out.w.push(half * w);
    }
}

/// Composite rule on a lattice of panel edges `m * width`, covering
/// `[lo, hi]` and clipped to `clip` when given.
pub fn lattice_rule(
    lo: f64,
    hi: f64,
    width: f64,
    q: usize,
    clip: Option<(f64, f64)>,
) -> AxisNodes {
    let (gx, gw) = gauss_legendre(q);
    let (lo, hi) = match clip {
        Some((a, b)) => (lo.max(a), hi.min(b)),
        None => (lo, hi),
    };
    let mut out = AxisNodes::default();
    if !(hi > lo) {
        return out;
    }
    let m_lo = (lo / width).floor() as i64;
    let m_hi = (hi / width).ceil() as i64;
    for m in m_lo..m_hi {
        let mut a = m as f64 * width;
        let mut b = (m + 1) as f64 * width;
        if let Some((ca, cb)) = clip {
            a = a.max(ca);
            b = b.min(cb);
        }
        if b > a {
            push_panel(&mut out, a, b, &gx, &gw);
        }
    }
    out
}

/// Discretization of the pair expectations: `q` nodes on every panel of a
/// lattice of panel edges.
///
/// Without a fixed width, a Gaussian site gets about `order` nodes across
/// its window. Widths are `2L / m` for even panel counts `m`, so the box
/// faces are panel edges, and a site between two counts uses a smooth blend
/// of both lattices (see [`WidthBlend`]). The blended rule is C1 in `k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PanelRule {
    pub nodes_per_panel: usize,
    /// Panels across a Gaussian window, or across the box for flat sites.
    pub panels: usize,
    pub fixed_width: Option<f64>,
}

/// Two panel widths and the weight of the finer one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WidthBlend {
    pub coarse_width: f64,
    pub fine_width: f64,
    pub fine_weight: f64,
    /// Derivative of `fine_weight` with respect to `log(span)`.
    pub dweight_dlog_span: f64,
}

impl PanelRule {
    /// `order` nodes per window, four per panel where possible.
    pub fn from_order(order: usize, panel_width: Option<f64>) -> Self {
        let q = order.clamp(1, 4);
        Self {
            nodes_per_panel: q,
            panels: (order / q).max(1),
            fixed_width: panel_width,
        }
    }

    fn min_count(&self) -> f64 {
        2.0 * (self.panels as f64 / 2.0).ceil()
    }

    /// Panel width for a flat site.
    pub fn flat_width(&self, half_width: f64) -> f64 {
        self.fixed_width.unwrap_or(2.0 * half_width / self.min_count())
    }

    /// Widths for a site whose window spans `span`. The continuous panel
    /// count `2L * panels / span` sits between two even counts; the weight
    /// of the finer one is a smoothstep of the position between them.
    pub fn blend(&self, half_width: f64, span: f64) -> WidthBlend {
        let single = |h: f64| WidthBlend {
            coarse_width: h,
            fine_width: h,
            fine_weight: 0.0,
            dweight_dlog_span: 0.0,
        };
        if let Some(h) = self.fixed_width {
            return single(h);
        }
        let m0 = self.min_count();
        let m = 2.0 * half_width * self.panels as f64 / span;
        if !(m > m0) {
            return single(2.0 * half_width / m0);
        }
        let level = (m / 2.0).floor();
        let t = m / 2.0 - level;
        WidthBlend {
            coarse_width: half_width / level,
            fine_width: half_width / (level + 1.0),
            fine_weight: t * t * (3.0 - 2.0 * t),
            // dm / dlog(span) = -m.
            dweight_dlog_span: -6.0 * t * (1.0 - t) * m / 2.0,
        }
    }

    /// The rule with panels twice as wide, used for error estimates. Kinks
    /// in `phi` (clamps, cones at `r = 0`) limit both rules to low order, and
    /// halving the node count on the same panels would hide that.
    pub fn coarse(&self) -> Self {
        Self {
            panels: (self.panels / 2).max(1),
            fixed_width: self.fixed_width.map(|h| 2.0 * h),
            ..*self
        }
    }
}

/// Mixed-radix iteration over `0..sizes[0] x 0..sizes[1] x ...`, last
/// axis fastest.
pub(crate) fn for_each_multi_index(sizes: &[usize], mut f: impl FnMut(&[usize])) {
    if sizes.iter().any(|&s| s == 0) {
        return;
    }
    let dims = sizes.len();
    let mut idx = vec![0usize; dims];
    loop {
        f(&idx);
        let mut axis = dims;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < sizes[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn weights_sum_to_two() {
        for n in 1..=40 {
            let (_, w) = gauss_legendre(n);
            assert_abs_diff_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn exact_for_polynomials() {
        for n in 1..=12 {
            let (x, w) = gauss_legendre(n);
            for deg in 0..2 * n {
                let got: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert_abs_diff_eq!(got, exact, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn three_point_nodes() {
        let (x, w) = gauss_legendre(3);
        assert_abs_diff_eq!(x[2], (0.6f64).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 8.0 / 9.0, epsilon = 1e-15);
    }

    #[test]
    fn lattice_is_origin_aligned() {
        let r = lattice_rule(-1.3, 0.7, 0.5, 2, Some((-1.0, 1.0)));
        // Whole panels are kept, so the clipped rule spans the box.
        assert_abs_diff_eq!(r.w.iter().sum::<f64>(), 2.0, epsilon = 1e-14);
        let r2 = lattice_rule(-1.3, 0.7, 0.5, 2, None);
        let shared: Vec<_> = r2.x.iter().filter(|&&x| x > -1.0).copied().collect();
        let clipped: Vec<_> = r.x.iter().filter(|&&x| x > -1.0).copied().collect();
        assert_eq!(shared, clipped);
    }

    #[test]
    fn composite_integrates_gaussian() {
        let r = composite(-8.0, 8.0, 16, 8);
        let v = r.integrate(|x| (-x * x / 2.0).exp());
        assert_abs_diff_eq!(v, (2.0 * PI).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn panel_width_levels() {
        let rule = PanelRule::from_order(32, None);
        // Flat site: eight panels across the box.
        assert_eq!(rule.flat_width(2.0), 0.5);
        // Narrow window: between 80 and 82 panels across the box.
        let b = rule.blend(2.0, 0.39);
        assert_eq!(b.coarse_width, 4.0 / 82.0);
        assert_eq!(b.fine_width, 4.0 / 84.0);
        assert!(b.fine_weight > 0.0 && b.fine_weight < 1.0);
        // The weight is continuous across a level.
        let below = rule.blend(2.0, 32.0 / 82.0 * (1.0 + 1e-12));
        let above = rule.blend(2.0, 32.0 / 82.0 * (1.0 - 1e-12));
        assert!(below.fine_weight > 0.999_999 && above.fine_weight < 1e-6);
        assert_eq!(below.fine_width, above.coarse_width);
        let fixed = PanelRule::from_order(32, Some(0.3)).blend(2.0, 0.1);
        assert_eq!((fixed.coarse_width, fixed.fine_weight), (0.3, 0.0));
    }

    #[test]
    fn multi_index_count() {
        let mut count = 0;
        for_each_multi_index(&[3, 3, 2, 3], |_| count += 1);
        assert_eq!(count, 54);
    }
}
