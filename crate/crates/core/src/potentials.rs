//! Pair potentials and the system potentials built from them.

use serde::{Deserialize, Serialize};

use crate::domain::{distance, HarmonicVariant, Model, OccupancyVector, Positions, SystemState};
use crate::error::{DmdError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    /// `4 eps ((sigma/r)^12 - (sigma/r)^6)`.
    LennardJones,
    /// `eps ((1 - exp(-alpha (r - r0)))^2 - 1)`.
    Morse,
    /// `stiffness / 2 (r - r0)^2`.
    HarmonicBond,
}

/// A pair function with optional cutoff and an inner clamp.
///
/// `length` is `sigma` for Lennard-Jones and `r0` otherwise. Below
/// `r_inner` the value is frozen at `phi(r_inner)`, which keeps every system
/// potential bounded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairPotentialSpec {
    pub kind: PairKind,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "one")]
    pub length: f64,
    /// Morse range parameter.
    #[serde(default = "one")]
    pub alpha: f64,
    /// Harmonic bond stiffness.
    #[serde(default)]
    pub stiffness: f64,
    /// `None` means no cutoff.
    #[serde(default)]
    pub r_cut: Option<f64>,
    #[serde(default = "yes")]
    pub shift: bool,
    /// Defaults to `0.1 * length` for Lennard-Jones and Morse, 0 for bonds.
    #[serde(default)]
    pub r_inner: Option<f64>,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl PairPotentialSpec {
    pub fn lennard_jones(epsilon: f64, sigma: f64, r_cut: Option<f64>, shift: bool) -> Self {
        Self {
            kind: PairKind::LennardJones,
            epsilon,
            length: sigma,
            alpha: 1.0,
            stiffness: 0.0,
            r_cut,
            shift,
            r_inner: None,
        }
    }

    pub fn morse(epsilon: f64, r0: f64, alpha: f64, r_cut: Option<f64>, shift: bool) -> Self {
        Self {
            kind: PairKind::Morse,
            epsilon,
            length: r0,
            alpha,
            stiffness: 0.0,
            r_cut,
            shift,
            r_inner: None,
        }
    }

    pub fn harmonic_bond(stiffness: f64, r0: f64, r_cut: Option<f64>, shift: bool) -> Self {
        Self {
            kind: PairKind::HarmonicBond,
            epsilon: 0.0,
            length: r0,
            alpha: 1.0,
            stiffness,
            r_cut,
            shift,
            r_inner: None,
        }
    }

    /// `phi = 0` everywhere.
    pub fn zero() -> Self {
        Self::lennard_jones(0.0, 1.0, None, false)
    }

    pub fn with_inner(mut self, r_inner: f64) -> Self {
        self.r_inner = Some(r_inner);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DmdError::InvalidParameter(m));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        match self.kind {
            PairKind::HarmonicBond => {
                if !(self.length >= 0.0 && self.length.is_finite()) {
                    return bad(format!("bond length must be >= 0, got {}", self.length));
                }
                if !(self.stiffness >= 0.0 && self.stiffness.is_finite()) {
                    return bad(format!("bond stiffness must be >= 0, got {}", self.stiffness));
                }
            }
            _ => {
                if !(self.length > 0.0 && self.length.is_finite()) {
                    return bad(format!("length scale must be positive, got {}", self.length));
                }
            }
        }
        if self.kind == PairKind::Morse && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("Morse alpha must be positive, got {}", self.alpha));
        }
        if let Some(rc) = self.r_cut {
            if !(rc > 0.0) {
                return bad(format!("r_cut must be positive, got {rc}"));
            }
        }
        if let Some(ri) = self.r_inner {
            if !(ri >= 0.0 && ri.is_finite()) {
                return bad(format!("r_inner must be >= 0, got {ri}"));
            }
        }
        if self.kind == PairKind::LennardJones && self.inner() <= 0.0 && !self.is_zero() {
            return bad("Lennard-Jones needs a positive inner clamp".into());
        }
        Ok(())
    }

    /// True when the function vanishes identically.
    pub fn is_zero(&self) -> bool {
        match self.kind {
            PairKind::HarmonicBond => self.stiffness == 0.0,
            _ => self.epsilon == 0.0,
        }
    }

    pub fn inner(&self) -> f64 {
        self.r_inner.unwrap_or(match self.kind {
            PairKind::HarmonicBond => 0.0,
            _ => 0.1 * self.length,
        })
    }

    pub fn cutoff(&self) -> f64 {
        self.r_cut.unwrap_or(f64::INFINITY)
    }

    fn raw(&self, r: f64) -> f64 {
        match self.kind {
            PairKind::LennardJones => {
                let s6 = (self.length / r).powi(6);
                4.0 * self.epsilon * (s6 * s6 - s6)
            }
            PairKind::Morse => {
                let e = (-self.alpha * (r - self.length)).exp();
                self.epsilon * ((1.0 - e) * (1.0 - e) - 1.0)
            }
            PairKind::HarmonicBond => 0.5 * self.stiffness * (r - self.length).powi(2),
        }
    }

    fn offset(&self) -> f64 {
        let rc = self.cutoff();
        if self.shift && rc.is_finite() {
            self.raw(rc.max(self.inner()))
        } else {
            0.0
        }
    }

    /// Evaluates without argument checks; `r = 0` is allowed and falls
    /// under the inner clamp.
    #[inline]
    pub(crate) fn eval_unchecked(&self, r: f64) -> f64 {
        if r >= self.cutoff() {
            return 0.0;
        }
        self.raw(r.max(self.inner())) - self.offset()
    }

    /// Precomputed evaluator for hot loops.
    pub(crate) fn evaluator(&self) -> PairEvaluator {
        PairEvaluator {
            spec: self.clone(),
            r_in: self.inner(),
            r_cut: self.cutoff(),
            offset: self.offset(),
            zero: self.is_zero(),
        }
    }

    /// Bound on `|phi(r)|` over `0 < r <= r_max`. Each kind is monotone on
    /// either side of its well, so the endpoints and the well suffice.
    pub fn sup_abs(&self, r_max: f64) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        let r_in = self.inner();
        let hi = self.cutoff().min(r_max).max(r_in);
        if !hi.is_finite() {
            return match self.kind {
                PairKind::HarmonicBond => f64::INFINITY,
                _ => self.raw(self.well().max(r_in)).abs().max(self.raw(r_in).abs()),
            };
        }
        let value = |r: f64| self.raw(r.clamp(r_in, hi)) - self.offset();
        [r_in, self.well(), hi]
            .into_iter()
            .map(|r| value(r).abs())
            .fold(0.0, f64::max)
    }

    fn well(&self) -> f64 {
        match self.kind {
            PairKind::LennardJones => 2f64.powf(1.0 / 6.0) * self.length,
            _ => self.length,
        }
    }
}

/// `phi(r)` with the clamp and cutoff applied.
pub fn eval_phi(spec: &PairPotentialSpec, r: f64) -> Result<f64> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(DmdError::InvalidSeparation(r));
    }
    Ok(spec.eval_unchecked(r))
}

#[derive(Clone, Debug)]
pub(crate) struct PairEvaluator {
    spec: PairPotentialSpec,
    r_in: f64,
    r_cut: f64,
    offset: f64,
    zero: bool,
}

impl PairEvaluator {
    #[inline]
    pub fn is_zero(&self) -> bool {
        self.zero
    }

    /// Takes the squared separation.
    #[inline]
    pub fn eval_r2(&self, r2: f64) -> f64 {
        if self.zero || r2 >= self.r_cut * self.r_cut {
            return 0.0;
        }
        let r_in2 = self.r_in * self.r_in;
        let r2 = r2.max(r_in2);
        let v = match self.spec.kind {
            PairKind::LennardJones => {
                let s2 = self.spec.length * self.spec.length / r2;
                let s6 = s2 * s2 * s2;
                4.0 * self.spec.epsilon * (s6 * s6 - s6)
            }
            PairKind::Morse => {
                let e = (-self.spec.alpha * (r2.sqrt() - self.spec.length)).exp();
                self.spec.epsilon * ((1.0 - e) * (1.0 - e) - 1.0)
            }
            PairKind::HarmonicBond => {
                if self.spec.length == 0.0 {
                    0.5 * self.spec.stiffness * r2
                } else {
                    0.5 * self.spec.stiffness * (r2.sqrt() - self.spec.length).powi(2)
                }
            }
        };
        v - self.offset
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlloyPotentialSpec {
    pub aa: PairPotentialSpec,
    pub ab: PairPotentialSpec,
    pub bb: PairPotentialSpec,
}

impl AlloyPotentialSpec {
    pub fn uniform(phi: PairPotentialSpec) -> Self {
        Self {
            aa: phi.clone(),
            ab: phi.clone(),
            bb: phi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.aa.validate()?;
        self.ab.validate()?;
        self.bb.validate()
    }

    /// Pair function for species indicators `a_i, a_j` (1 = A, 0 = B).
    pub fn select(&self, ai: u8, aj: u8) -> &PairPotentialSpec {
        match (ai, aj) {
            (1, 1) => &self.aa,
            (0, 0) => &self.bb,
            _ => &self.ab,
        }
    }
}

/// The interaction a system is simulated with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interaction {
    Pair(PairPotentialSpec),
    Alloy(AlloyPotentialSpec),
}

impl Interaction {
    pub fn validate(&self) -> Result<()> {
        match self {
            Interaction::Pair(p) => p.validate(),
            Interaction::Alloy(a) => a.validate(),
        }
    }

    /// Checks the interaction kind against the model.
    pub fn check_model(&self, model: Model) -> Result<()> {
        match (self, model) {
            (Interaction::Pair(_), Model::Vacancy) | (Interaction::Alloy(_), Model::Binary) => {
                Ok(())
            }
            (Interaction::Pair(_), Model::Binary) => Err(DmdError::Config(
                "the binary model needs an alloy potential (aa, ab, bb)".into(),
            )),
            (Interaction::Alloy(_), Model::Vacancy) => Err(DmdError::Config(
                "the vacancy model needs a single pair potential".into(),
            )),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Interaction::Pair(p) => p.is_zero(),
            Interaction::Alloy(a) => a.aa.is_zero() && a.ab.is_zero() && a.bb.is_zero(),
        }
    }

    /// Largest cutoff among the pair functions.
    pub fn max_cutoff(&self) -> f64 {
        match self {
            Interaction::Pair(p) => p.cutoff(),
            Interaction::Alloy(a) => a.aa.cutoff().max(a.ab.cutoff()).max(a.bb.cutoff()),
        }
    }

    pub fn sup_abs(&self, r_max: f64) -> f64 {
        match self {
            Interaction::Pair(p) => p.sup_abs(r_max),
            Interaction::Alloy(a) => a
                .aa
                .sup_abs(r_max)
                .max(a.ab.sup_abs(r_max))
                .max(a.bb.sup_abs(r_max)),
        }
    }
}

fn check_shape(state: &SystemState, x: &Positions, a: Option<&OccupancyVector>) -> Result<()> {
    let n = state.n_sites();
    if x.dim() != state.dim() {
        return Err(DmdError::Shape {
            expected: state.dim(),
            got: x.dim(),
        });
    }
    if x.len() != n {
        return Err(DmdError::Shape {
            expected: n,
            got: x.len(),
        });
    }
    if let Some(a) = a {
        if a.len() != n {
            return Err(DmdError::Shape {
                expected: n,
                got: a.len(),
            });
        }
    }
    Ok(())
}

fn pair_sum(x: &Positions, mut weight_phi: impl FnMut(usize, usize, f64) -> f64) -> f64 {
    let n = x.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += weight_phi(i, j, distance(x.site(i), x.site(j)));
        }
    }
    total
}

/// `sum_{i<j} a_i a_j phi(|x_i - x_j|)`.
pub fn v_dmd(
    state: &SystemState,
    phi: &PairPotentialSpec,
    x: &Positions,
    a: &OccupancyVector,
) -> Result<f64> {
    check_shape(state, x, Some(a))?;
    let s = a.as_slice();
    Ok(pair_sum(x, |i, j, r| {
        if s[i] == 1 && s[j] == 1 {
            phi.eval_unchecked(r)
        } else {
            0.0
        }
    }))
}

/// Binary alloy potential; `a_i = 1` is species A.
pub fn v_ab(
    state: &SystemState,
    alloy: &AlloyPotentialSpec,
    x: &Positions,
    a: &OccupancyVector,
) -> Result<f64> {
    check_shape(state, x, Some(a))?;
    let s = a.as_slice();
    Ok(pair_sum(x, |i, j, r| alloy.select(s[i], s[j]).eval_unchecked(r)))
}

/// `sum_{i<j} c_i c_j phi(|x_i - x_j|)`.
pub fn v_mean_field(state: &SystemState, phi: &PairPotentialSpec, x: &Positions) -> Result<f64> {
    if !state.mean_field() {
        return Err(DmdError::Config("v_mean_field called on a state without mean_field".into()));
    }
    check_shape(state, x, None)?;
    let c = state.c_values();
    Ok(pair_sum(x, |i, j, r| c[i] * c[j] * phi.eval_unchecked(r)))
}

/// Harmonic approximate potential in the state's variant.
pub fn v_hat(state: &SystemState, x: &Positions, a: &OccupancyVector) -> Result<f64> {
    check_shape(state, x, Some(a))?;
    let gated = state.variant() == HarmonicVariant::Gated;
    let mut total = 0.0;
    for (i, s) in state.sites().iter().enumerate() {
        if gated && a.as_slice()[i] == 0 {
            continue;
        }
        let r = distance(x.site(i), &s.x);
        total += 0.5 * s.k * r * r;
    }
    Ok(total)
}

/// The true potential of the state's model.
pub fn v_true(
    state: &SystemState,
    interaction: &Interaction,
    x: &Positions,
    a: &OccupancyVector,
) -> Result<f64> {
    interaction.check_model(state.model())?;
    match interaction {
        Interaction::Pair(phi) if state.mean_field() => v_mean_field(state, phi, x),
        Interaction::Pair(phi) => v_dmd(state, phi, x, a),
        Interaction::Alloy(alloy) => v_ab(state, alloy, x, a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ThermodynamicDomain;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn chain(n: usize, mean_field: bool, c: f64) -> SystemState {
        let d = ThermodynamicDomain::new(1.0, 1, 5.0).unwrap();
        let params = (0..n).map(|i| (vec![i as f64 - 1.0], 1.0, c)).collect();
        let topo = (0..n)
            .map(|i| {
                let mut v = Vec::new();
                if i > 0 {
                    v.push(i - 1);
                }
                if i + 1 < n {
                    v.push(i + 1);
                }
                v
            })
            .collect();
        SystemState::new(d, params, topo, Model::Vacancy, HarmonicVariant::Gated, mean_field)
            .unwrap()
    }

    #[test]
    fn lj_minimum() {
        let lj = PairPotentialSpec::lennard_jones(1.0, 1.0, None, false);
        assert_abs_diff_eq!(eval_phi(&lj, 2f64.powf(1.0 / 6.0)).unwrap(), -1.0, epsilon = 1e-14);
    }

    #[test]
    fn lj_shifted_cutoff() {
        let lj = PairPotentialSpec::lennard_jones(1.0, 1.0, Some(2.5), true);
        assert_abs_diff_eq!(eval_phi(&lj, 2.5).unwrap(), 0.0);
        assert!(eval_phi(&lj, 2.4999).unwrap().abs() < 1e-3);
        assert_eq!(eval_phi(&lj, 3.0).unwrap(), 0.0);
    }

    #[test]
    fn morse_minimum() {
        let m = PairPotentialSpec::morse(1.0, 1.0, 1.0, None, false);
        assert_abs_diff_eq!(eval_phi(&m, 1.0).unwrap(), -1.0, epsilon = 1e-15);
    }

    #[test]
    fn nonpositive_separation_rejected() {
        let lj = PairPotentialSpec::lennard_jones(1.0, 1.0, None, false);
        assert!(matches!(eval_phi(&lj, 0.0), Err(DmdError::InvalidSeparation(_))));
        assert!(eval_phi(&lj, -1.0).is_err());
    }

    #[test]
    fn inner_clamp_freezes_value() {
        let lj = PairPotentialSpec::lennard_jones(1.0, 1.0, None, false);
        let at = eval_phi(&lj, 0.1).unwrap();
        assert_eq!(eval_phi(&lj, 0.01).unwrap(), at);
        assert!(at.is_finite());
    }

    #[test]
    fn evaluator_matches_direct() {
        let specs = [
            PairPotentialSpec::lennard_jones(1.3, 0.9, Some(2.2), true),
            PairPotentialSpec::morse(0.7, 1.1, 1.8, Some(3.0), false),
            PairPotentialSpec::harmonic_bond(2.0, 0.5, None, false),
            PairPotentialSpec::harmonic_bond(2.0, 0.0, Some(1.5), true),
        ];
        for s in &specs {
            let e = s.evaluator();
            for k in 1..200 {
                let r = k as f64 * 0.02;
                assert_relative_eq!(e.eval_r2(r * r), s.eval_unchecked(r), epsilon = 1e-12, max_relative = 1e-13);
            }
        }
    }

    #[test]
    fn vdmd_examples() {
        let phi = PairPotentialSpec::morse(1.0, 1.0, 1.0, None, false);
        let st = chain(3, false, 0.5);
        let x = Positions::from_points(&[vec![0.0], vec![0.7], vec![2.0]]).unwrap();
        assert_eq!(v_dmd(&st, &phi, &x, &OccupancyVector::zeros(3)).unwrap(), 0.0);
        let a = OccupancyVector::new(vec![1, 1, 0]).unwrap();
        assert_abs_diff_eq!(
            v_dmd(&st, &phi, &x, &a).unwrap(),
            eval_phi(&phi, 0.7).unwrap(),
            epsilon = 1e-15
        );
        let bad = Positions::from_points(&[vec![0.0]]).unwrap();
        assert!(matches!(v_dmd(&st, &phi, &bad, &a), Err(DmdError::Shape { .. })));
    }

    #[test]
    fn vab_selects_species_pairs() {
        let d = ThermodynamicDomain::new(1.0, 1, 2.0).unwrap();
        let st = SystemState::new(
            d,
            vec![(vec![0.0], 1.0, 0.5), (vec![1.0], 1.0, 0.5)],
            vec![vec![1], vec![0]],
            Model::Binary,
            HarmonicVariant::AlwaysOn,
            false,
        )
        .unwrap();
        let alloy = AlloyPotentialSpec {
            aa: PairPotentialSpec::harmonic_bond(1.0, 0.0, None, false),
            ab: PairPotentialSpec::harmonic_bond(2.0, 0.0, None, false),
            bb: PairPotentialSpec::harmonic_bond(3.0, 0.0, None, false),
        };
        let x = Positions::from_points(&[vec![0.0], vec![1.0]]).unwrap();
        let v = |a: Vec<u8>| v_ab(&st, &alloy, &x, &OccupancyVector::new(a).unwrap()).unwrap();
        assert_eq!(v(vec![1, 1]), 0.5);
        assert_eq!(v(vec![1, 0]), 1.0);
        assert_eq!(v(vec![0, 1]), 1.0);
        assert_eq!(v(vec![0, 0]), 1.5);
    }

    #[test]
    fn mean_field_examples() {
        let phi = PairPotentialSpec::morse(1.0, 1.0, 1.0, None, false);
        let x = Positions::from_points(&[vec![0.0], vec![1.3]]).unwrap();
        let st = chain(2, true, 0.5);
        assert_abs_diff_eq!(
            v_mean_field(&st, &phi, &x).unwrap(),
            0.25 * eval_phi(&phi, 1.3).unwrap(),
            epsilon = 1e-15
        );
        let full = chain(2, true, 1.0);
        let direct = v_dmd(&full, &phi, &x, &OccupancyVector::ones(2)).unwrap();
        assert_abs_diff_eq!(v_mean_field(&full, &phi, &x).unwrap(), direct, epsilon = 1e-8);
        assert!(v_mean_field(&chain(2, false, 0.5), &phi, &x).is_err());
    }

    #[test]
    fn vhat_examples() {
        let st = chain(2, false, 0.5);
        let x = st.means();
        assert_eq!(v_hat(&st, &x, &OccupancyVector::ones(2)).unwrap(), 0.0);
        let far = Positions::from_points(&[vec![3.0], vec![-2.0]]).unwrap();
        assert_eq!(v_hat(&st, &far, &OccupancyVector::zeros(2)).unwrap(), 0.0);

        let d = ThermodynamicDomain::new(1.0, 1, 3.0).unwrap();
        let one = SystemState::new(
            d,
            vec![(vec![0.0], 2.0, 0.5)],
            vec![vec![]],
            Model::Vacancy,
            HarmonicVariant::AlwaysOn,
            false,
        )
        .unwrap();
        let x = Positions::from_points(&[vec![1.0]]).unwrap();
        assert_eq!(v_hat(&one, &x, &OccupancyVector::zeros(1)).unwrap(), 1.0);
    }

    #[test]
    fn sup_abs_bounds_samples() {
        let specs = [
            PairPotentialSpec::lennard_jones(1.0, 1.0, Some(2.5), true),
            PairPotentialSpec::lennard_jones(1.0, 1.0, None, false),
            PairPotentialSpec::morse(2.0, 1.0, 3.0, Some(2.0), true),
            PairPotentialSpec::harmonic_bond(1.0, 0.5, None, false),
        ];
        for s in &specs {
            let bound = s.sup_abs(4.0);
            for k in 1..=4000 {
                let r = k as f64 * 1e-3;
                assert!(s.eval_unchecked(r).abs() <= bound * (1.0 + 1e-12), "{s:?} r={r}");
            }
        }
    }

    fn occupancy_strategy(n: usize) -> impl Strategy<Value = Vec<u8>> {
        proptest::collection::vec(0u8..=1, n)
    }

    proptest! {
        #[test]
        fn permutation_invariance(
            xs in proptest::collection::vec(-2.0f64..2.0, 3),
            a in occupancy_strategy(3),
            perm in Just(vec![2usize, 0, 1]),
        ) {
            let phi = PairPotentialSpec::lennard_jones(1.0, 0.8, Some(2.0), true);
            let st = chain(3, false, 0.5);
            let x = Positions::new(1, xs.clone()).unwrap();
            let av = OccupancyVector::new(a.clone()).unwrap();
            let px = Positions::new(1, perm.iter().map(|&p| xs[p]).collect()).unwrap();
            let pa = OccupancyVector::new(perm.iter().map(|&p| a[p]).collect()).unwrap();
            let v1 = v_dmd(&st, &phi, &x, &av).unwrap();
            let v2 = v_dmd(&st, &phi, &px, &pa).unwrap();
            prop_assert!((v1 - v2).abs() <= 1e-12 * (1.0 + v1.abs()));
        }

        #[test]
        fn uniform_alloy_ignores_species(
            xs in proptest::collection::vec(-2.0f64..2.0, 3),
            a in occupancy_strategy(3),
        ) {
            let phi = PairPotentialSpec::morse(1.0, 1.0, 2.0, Some(2.5), true);
            let d = ThermodynamicDomain::new(1.0, 1, 2.0).unwrap();
            let st = SystemState::new(
                d,
                (0..3).map(|_| (vec![0.0], 1.0, 0.5)).collect(),
                vec![vec![1], vec![0, 2], vec![1]],
                Model::Binary,
                HarmonicVariant::AlwaysOn,
                false,
            ).unwrap();
            let x = Positions::new(1, xs).unwrap();
            let alloy = AlloyPotentialSpec::uniform(phi.clone());
            let v = v_ab(&st, &alloy, &x, &OccupancyVector::new(a).unwrap()).unwrap();
            let all = pair_sum(&x, |_, _, r| phi.eval_unchecked(r));
            prop_assert!((v - all).abs() < 1e-12);
        }

        #[test]
        fn bounded_by_pair_sup(
            xs in proptest::collection::vec(-2.0f64..2.0, 3),
            a in occupancy_strategy(3),
        ) {
            let phi = PairPotentialSpec::lennard_jones(1.0, 1.0, Some(2.5), true);
            let st = chain(3, false, 0.5);
            let x = Positions::new(1, xs).unwrap();
            let v = v_dmd(&st, &phi, &x, &OccupancyVector::new(a).unwrap()).unwrap();
            prop_assert!(v.abs() <= 3.0 * phi.sup_abs(4.0) * (1.0 + 1e-12));
        }

        #[test]
        fn bernoulli_average_is_mean_field(
            xs in proptest::collection::vec(-2.0f64..2.0, 4),
            cs in proptest::collection::vec(0.01f64..0.99, 4),
        ) {
            let phi = PairPotentialSpec::morse(1.0, 1.0, 1.5, None, false);
            let d = ThermodynamicDomain::new(1.0, 1, 2.0).unwrap();
            let params: Vec<_> = cs.iter().map(|&c| (vec![0.0], 1.0, c)).collect();
            let topo = vec![vec![1], vec![0, 2], vec![1, 3], vec![2]];
            let st = SystemState::new(d.clone(), params.clone(), topo.clone(),
                Model::Vacancy, HarmonicVariant::Gated, false).unwrap();
            let mf = SystemState::new(d, params, topo, Model::Vacancy, HarmonicVariant::Gated, true)
                .unwrap();
            let x = Positions::new(1, xs).unwrap();
            let mut avg = 0.0;
            for mask in 0..16 {
                let a = OccupancyVector::from_mask(mask, 4);
                let p: f64 = (0..4)
                    .map(|i| if a.get(i) == 1.0 { cs[i] } else { 1.0 - cs[i] })
                    .product();
                avg += p * v_dmd(&st, &phi, &x, &a).unwrap();
            }
            let expected = v_mean_field(&mf, &phi, &x).unwrap();
            prop_assert!((avg - expected).abs() < 1e-12);
        }
    }
}
