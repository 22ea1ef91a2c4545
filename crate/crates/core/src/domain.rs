//! Domain, site and system-state types.
//!
//! The spatial domain is the symmetric box `(-L, L)^d`. Several closed forms
//! elsewhere in the crate (box moments factor per axis, the centroid of `D`
//! is the origin) rely on that symmetry.

use serde::{Deserialize, Serialize};

use crate::ensemble;
use crate::error::{DmdError, Result};

/// Occupancies are kept inside `[C_FLOOR, 1 - C_FLOOR]`.
pub const C_FLOOR: f64 = 1e-9;

/// Default stiffness cap of the admissible set.
pub const DEFAULT_K_MAX: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDomain", into = "RawDomain")]
pub struct ThermodynamicDomain {
    beta: f64,
    dim: usize,
    half_width: f64,
    volume: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RawDomain {
    beta: f64,
    dim: usize,
    half_width: f64,
}

impl TryFrom<RawDomain> for ThermodynamicDomain {
    type Error = DmdError;
    fn try_from(raw: RawDomain) -> Result<Self> {
        ThermodynamicDomain::new(raw.beta, raw.dim, raw.half_width)
    }
}

impl From<ThermodynamicDomain> for RawDomain {
    fn from(d: ThermodynamicDomain) -> Self {
        RawDomain {
            beta: d.beta,
            dim: d.dim,
            half_width: d.half_width,
        }
    }
}

impl ThermodynamicDomain {
    pub fn new(beta: f64, dim: usize, half_width: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(DmdError::InvalidDomain(format!("beta must be positive, got {beta}")));
        }
        if !(1..=3).contains(&dim) {
            return Err(DmdError::InvalidDomain(format!("dim must be 1, 2 or 3, got {dim}")));
        }
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(DmdError::InvalidDomain(format!(
                "half_width must be positive and finite, got {half_width}"
            )));
        }
        Ok(Self {
            beta,
            dim,
            half_width,
            volume: Self::volume_of(dim, half_width),
        })
    }

    fn volume_of(dim: usize, half_width: f64) -> f64 {
        (2.0 * half_width).powi(dim as i32)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    /// `|D| = (2L)^d`.
    pub fn volume(&self) -> f64 {
        self.volume
    }

    pub fn log_volume(&self) -> f64 {
        self.dim as f64 * (2.0 * self.half_width).ln()
    }

    /// Same temperature and dimension, different box.
    pub fn with_half_width(&self, half_width: f64) -> Result<Self> {
        Self::new(self.beta, self.dim, half_width)
    }

    /// Membership in the closed box `[-L, L]^d`.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim && x.iter().all(|v| v.abs() <= self.half_width)
    }
}

/// Which potentials the system uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    /// Single species with vacancies.
    Vacancy,
    /// Two species, every site occupied.
    Binary,
}

/// Form of the harmonic approximate potential.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HarmonicVariant {
    /// `sum_i a_i k_i / 2 |x_i - X_i|^2`: an empty site feels no force.
    Gated,
    /// `sum_i k_i / 2 |x_i - X_i|^2` regardless of occupancy.
    AlwaysOn,
}

impl HarmonicVariant {
    pub fn default_for(model: Model) -> Self {
        match model {
            Model::Vacancy => HarmonicVariant::Gated,
            Model::Binary => HarmonicVariant::AlwaysOn,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteState {
    /// Mean position `X_i`, length `d`.
    pub x: Vec<f64>,
    /// Stiffness `k_i`.
    pub k: f64,
    /// Occupancy probability `c_i`.
    pub c: f64,
    /// Cached approximate chemical potential.
    pub mu_hat: f64,
    /// Cached single-site Gaussian partition value `Z_i`.
    pub z: f64,
}

/// Binary occupancy vector `a`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyVector(Vec<u8>);

impl OccupancyVector {
    pub fn new(a: Vec<u8>) -> Result<Self> {
        if a.iter().any(|&v| v > 1) {
            return Err(DmdError::InvalidParameter("occupancies must be 0 or 1".into()));
        }
        Ok(Self(a))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0; n])
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1; n])
    }

    /// Bits of `mask` read from least significant upwards, one per site.
    pub fn from_mask(mask: usize, n: usize) -> Self {
        Self((0..n).map(|i| ((mask >> i) & 1) as u8).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i] as f64
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }
}

/// Flat list of `n` points in `R^dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Positions {
    dim: usize,
    data: Vec<f64>,
}

impl Positions {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(DmdError::Shape {
                expected: dim,
                got: data.len(),
            });
        }
        Ok(Self { dim, data })
    }

    pub fn zeros(n: usize, dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; n * dim],
        }
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map(|p| p.len()).unwrap_or(1);
        let mut data = Vec::with_capacity(points.len() * dim);
        for p in points {
            if p.len() != dim {
                return Err(DmdError::Shape {
                    expected: dim,
                    got: p.len(),
                });
            }
            data.extend_from_slice(p);
        }
        Self::new(dim, data)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn site(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn site_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        distance(self.site(i), self.site(j))
    }
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(u, v)| (u - v) * (u - v))
        .sum::<f64>()
        .sqrt()
}

/// Immutable system state. Successor states are built with the `with_*`
/// methods, which re-validate and refresh the cached `mu_hat` and `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    domain: ThermodynamicDomain,
    sites: Vec<SiteState>,
    topology: Vec<Vec<usize>>,
    model: Model,
    variant: HarmonicVariant,
    mean_field: bool,
    k_max: f64,
}

/// Per-site inputs: `(X_i, k_i, c_i)`.
pub type SiteParams = (Vec<f64>, f64, f64);

impl SystemState {
    pub fn new(
        domain: ThermodynamicDomain,
        params: Vec<SiteParams>,
        topology: Vec<Vec<usize>>,
        model: Model,
        variant: HarmonicVariant,
        mean_field: bool,
    ) -> Result<Self> {
        Self::with_k_max(domain, params, topology, model, variant, mean_field, DEFAULT_K_MAX)
    }

    pub fn with_k_max(
        domain: ThermodynamicDomain,
        params: Vec<SiteParams>,
        topology: Vec<Vec<usize>>,
        model: Model,
        variant: HarmonicVariant,
        mean_field: bool,
        k_max: f64,
    ) -> Result<Self> {
        if params.is_empty() {
            return Err(DmdError::InvalidParameter("a system needs at least one site".into()));
        }
        if model == Model::Binary && variant == HarmonicVariant::Gated {
            return Err(DmdError::Config(
                "the binary model always carries an atom on every site; use the always_on variant"
                    .into(),
            ));
        }
        if model == Model::Binary && mean_field {
            return Err(DmdError::Config("mean_field applies to the vacancy model only".into()));
        }
        if !(k_max > 0.0) {
            return Err(DmdError::InvalidParameter(format!("k_max must be positive, got {k_max}")));
        }
        let sites = params
            .into_iter()
            .map(|(x, k, c)| SiteState {
                x,
                k,
                c,
                mu_hat: f64::NAN,
                z: f64::NAN,
            })
            .collect();
        let mut state = Self {
            domain,
            sites,
            topology,
            model,
            variant,
            mean_field,
            k_max,
        };
        state.validate()?;
        state.refresh();
        Ok(state)
    }

    fn validate(&mut self) -> Result<()> {
        let n = self.sites.len();
        let dim = self.domain.dim();
        let l = self.domain.half_width();
        for (i, s) in self.sites.iter_mut().enumerate() {
            if s.x.len() != dim {
                return Err(DmdError::Shape {
                    expected: dim,
                    got: s.x.len(),
                });
            }
            for &v in &s.x {
                if !v.is_finite() || v.abs() > l {
                    return Err(DmdError::DomainTooSmall {
                        site: i,
                        coord: v,
                        half_width: l,
                    });
                }
            }
            if !(s.k >= 0.0 && s.k <= self.k_max) {
                return Err(DmdError::InvalidParameter(format!(
                    "stiffness of site {i} must lie in [0, {}], got {}",
                    self.k_max, s.k
                )));
            }
            if !s.c.is_finite() {
                return Err(DmdError::InvalidParameter(format!("c of site {i} is not finite")));
            }
            s.c = clamp_occupancy(s.c);
        }
        if self.topology.len() != n {
            return Err(DmdError::Shape {
                expected: n,
                got: self.topology.len(),
            });
        }
        for (i, nbrs) in self.topology.iter().enumerate() {
            for &j in nbrs {
                if j >= n || j == i {
                    return Err(DmdError::InvalidParameter(format!(
                        "bad neighbor {j} for site {i}"
                    )));
                }
                if !self.topology[j].contains(&i) {
                    return Err(DmdError::InvalidParameter(format!(
                        "topology is not symmetric: {j} in N({i}) but {i} not in N({j})"
                    )));
                }
            }
        }
        Ok(())
    }

    fn refresh(&mut self) {
        let variant = self.variant;
        for s in &mut self.sites {
            s.z = ensemble::single_site_z_unchecked(&self.domain, &s.x, s.k);
            s.mu_hat = ensemble::mu_hat_for(&self.domain, s.c, s.z, variant);
        }
    }

    pub fn domain(&self) -> &ThermodynamicDomain {
        &self.domain
    }

    pub fn sites(&self) -> &[SiteState] {
        &self.sites
    }

    pub fn site(&self, i: usize) -> &SiteState {
        &self.sites[i]
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn beta(&self) -> f64 {
        self.domain.beta()
    }

    pub fn topology(&self) -> &[Vec<usize>] {
        &self.topology
    }

    pub fn model(&self) -> Model {
        self.model
    }

    pub fn variant(&self) -> HarmonicVariant {
        self.variant
    }

    pub fn mean_field(&self) -> bool {
        self.mean_field
    }

    pub fn k_max(&self) -> f64 {
        self.k_max
    }

    /// Undirected edges `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for (i, nbrs) in self.topology.iter().enumerate() {
            let mut sorted: Vec<usize> = nbrs.iter().copied().filter(|&j| j > i).collect();
            sorted.sort_unstable();
            sorted.dedup();
            edges.extend(sorted.into_iter().map(|j| (i, j)));
        }
        edges
    }

    pub fn means(&self) -> Positions {
        let data = self.sites.iter().flat_map(|s| s.x.iter().copied()).collect();
        Positions {
            dim: self.dim(),
            data,
        }
    }

    pub fn c_values(&self) -> Vec<f64> {
        self.sites.iter().map(|s| s.c).collect()
    }

    pub fn k_values(&self) -> Vec<f64> {
        self.sites.iter().map(|s| s.k).collect()
    }

    fn successor(&self, params: Vec<SiteParams>) -> Result<Self> {
        Self::with_k_max(
            self.domain.clone(),
            params,
            self.topology.clone(),
            self.model,
            self.variant,
            self.mean_field,
            self.k_max,
        )
    }

    /// New state with the given mean positions (flat, `N*d`) and stiffnesses.
    pub fn with_params(&self, x: &[f64], k: &[f64]) -> Result<Self> {
        let n = self.n_sites();
        let d = self.dim();
        if x.len() != n * d {
            return Err(DmdError::Shape {
                expected: n * d,
                got: x.len(),
            });
        }
        if k.len() != n {
            return Err(DmdError::Shape {
                expected: n,
                got: k.len(),
            });
        }
        let params = (0..n)
            .map(|i| (x[i * d..(i + 1) * d].to_vec(), k[i], self.sites[i].c))
            .collect();
        self.successor(params)
    }

    /// New state with the given occupancies; parameters unchanged.
    pub fn with_c(&self, c: &[f64]) -> Result<Self> {
        if c.len() != self.n_sites() {
            return Err(DmdError::Shape {
                expected: self.n_sites(),
                got: c.len(),
            });
        }
        let params = self
            .sites
            .iter()
            .zip(c)
            .map(|(s, &ci)| (s.x.clone(), s.k, ci))
            .collect();
        self.successor(params)
    }

    /// Same sites in a different box. Positions must still fit.
    pub fn with_domain(&self, domain: ThermodynamicDomain) -> Result<Self> {
        if domain.dim() != self.dim() {
            return Err(DmdError::Shape {
                expected: self.dim(),
                got: domain.dim(),
            });
        }
        let params = self.sites.iter().map(|s| (s.x.clone(), s.k, s.c)).collect();
        Self::with_k_max(
            domain,
            params,
            self.topology.clone(),
            self.model,
            self.variant,
            self.mean_field,
            self.k_max,
        )
    }

    pub fn with_variant(&self, variant: HarmonicVariant) -> Result<Self> {
        let params = self.sites.iter().map(|s| (s.x.clone(), s.k, s.c)).collect();
        Self::with_k_max(
            self.domain.clone(),
            params,
            self.topology.clone(),
            self.model,
            variant,
            self.mean_field,
            self.k_max,
        )
    }

    /// Overwrites a cached chemical potential without recomputing anything.
    /// Only meant for fault-injection tests of the cache-coherence checks.
    #[doc(hidden)]
    pub fn corrupt_mu_hat(&mut self, i: usize, mu_hat: f64) {
        self.sites[i].mu_hat = mu_hat;
    }
}

pub(crate) fn clamp_occupancy(c: f64) -> f64 {
    let clamped = c.clamp(C_FLOOR, 1.0 - C_FLOOR);
    if clamped != c {
        log::warn!("occupancy {c} clamped to {clamped}");
    }
    clamped
}

/// Per-site value given either as one scalar for all sites or as a list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerSite {
    Uniform(f64),
    List(Vec<f64>),
}

impl PerSite {
    pub fn resolve(&self, n: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            PerSite::Uniform(v) => Ok(vec![*v; n]),
            PerSite::List(vs) if vs.len() == n => Ok(vs.clone()),
            PerSite::List(vs) => Err(DmdError::Config(format!(
                "{what}: expected {n} values, got {}",
                vs.len()
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub dim: usize,
    pub counts: Vec<usize>,
    pub spacing: f64,
    pub c: PerSite,
    pub k: PerSite,
}

/// Regular grid centred at the origin with nearest-neighbour topology.
/// Sites are numbered row-major with the last axis fastest.
pub fn build_lattice(
    spec: &LatticeSpec,
    domain: ThermodynamicDomain,
    model: Model,
    variant: HarmonicVariant,
    mean_field: bool,
) -> Result<SystemState> {
    if spec.dim != domain.dim() {
        return Err(DmdError::Config(format!(
            "lattice dim {} does not match domain dim {}",
            spec.dim,
            domain.dim()
        )));
    }
    if spec.counts.len() != spec.dim || spec.counts.iter().any(|&m| m == 0) {
        return Err(DmdError::Config(
            "lattice counts need one positive entry per axis".into(),
        ));
    }
    if !(spec.spacing > 0.0) {
        return Err(DmdError::Config(format!("spacing must be positive, got {}", spec.spacing)));
    }
    let n: usize = spec.counts.iter().product();
    let c = spec.c.resolve(n, "lattice c")?;
    let k = spec.k.resolve(n, "lattice k")?;

    let strides: Vec<usize> = (0..spec.dim)
        .map(|a| spec.counts[a + 1..].iter().product())
        .collect();
    let index_of = |idx: &[usize]| -> usize { idx.iter().zip(&strides).map(|(m, s)| m * s).sum() };

    let l = domain.half_width();
    let mut params = Vec::with_capacity(n);
    let mut topology = vec![Vec::new(); n];
    for site in 0..n {
        let idx: Vec<usize> = (0..spec.dim)
            .map(|a| (site / strides[a]) % spec.counts[a])
            .collect();
        let x: Vec<f64> = idx
            .iter()
            .zip(&spec.counts)
            .map(|(&m, &count)| (m as f64 - (count as f64 - 1.0) / 2.0) * spec.spacing)
            .collect();
        if let Some(&coord) = x.iter().find(|v| v.abs() > l) {
            return Err(DmdError::DomainTooSmall {
                site,
                coord,
                half_width: l,
            });
        }
        for a in 0..spec.dim {
            for step in [-1i64, 1] {
                let m = idx[a] as i64 + step;
                if m >= 0 && (m as usize) < spec.counts[a] {
                    let mut nb = idx.clone();
                    nb[a] = m as usize;
                    topology[site].push(index_of(&nb));
                }
            }
        }
        topology[site].sort_unstable();
        params.push((x, k[site], c[site]));
    }
    SystemState::new(domain, params, topology, model, variant, mean_field)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lattice(dim: usize, counts: Vec<usize>, spacing: f64, l: f64) -> Result<SystemState> {
        let spec = LatticeSpec {
            dim,
            counts,
            spacing,
            c: PerSite::Uniform(0.5),
            k: PerSite::Uniform(1.0),
        };
        let domain = ThermodynamicDomain::new(1.0, dim, l)?;
        build_lattice(&spec, domain, Model::Vacancy, HarmonicVariant::Gated, false)
    }

    #[test]
    fn centered_chain() {
        let s = lattice(1, vec![3], 1.0, 2.0).unwrap();
        let xs: Vec<f64> = s.sites().iter().map(|s| s.x[0]).collect();
        assert_eq!(xs, vec![-1.0, 0.0, 1.0]);
        assert_eq!(s.topology()[1], vec![0, 2]);
        assert_eq!(s.topology()[0], vec![1]);
    }

    #[test]
    fn too_small_domain() {
        let err = lattice(1, vec![2], 5.0, 2.0).unwrap_err();
        assert!(matches!(err, DmdError::DomainTooSmall { .. }));
    }

    #[test]
    fn square_has_two_neighbors_each() {
        let s = lattice(2, vec![2, 2], 1.0, 1.0).unwrap();
        assert_eq!(s.n_sites(), 4);
        assert!(s.topology().iter().all(|n| n.len() == 2));
    }

    #[test]
    fn volume_matches_half_width() {
        for (dim, l) in [(1, 0.3), (2, 1.7), (3, 2.5)] {
            let d = ThermodynamicDomain::new(2.0, dim, l).unwrap();
            assert_eq!(d.volume(), (2.0 * l).powi(dim as i32));
            assert!((d.log_volume() - d.volume().ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_domain() {
        assert!(ThermodynamicDomain::new(0.0, 1, 1.0).is_err());
        assert!(ThermodynamicDomain::new(1.0, 4, 1.0).is_err());
        assert!(ThermodynamicDomain::new(1.0, 1, -1.0).is_err());
    }

    #[test]
    fn occupancy_is_clamped() {
        let d = ThermodynamicDomain::new(1.0, 1, 1.0).unwrap();
        let s = SystemState::new(
            d,
            vec![(vec![0.0], 1.0, 0.0), (vec![0.5], 1.0, 1.0)],
            vec![vec![1], vec![0]],
            Model::Vacancy,
            HarmonicVariant::Gated,
            false,
        )
        .unwrap();
        assert_eq!(s.site(0).c, C_FLOOR);
        assert_eq!(s.site(1).c, 1.0 - C_FLOOR);
        assert!(s.site(0).mu_hat.is_finite());
    }

    #[test]
    fn asymmetric_topology_rejected() {
        let d = ThermodynamicDomain::new(1.0, 1, 1.0).unwrap();
        let r = SystemState::new(
            d,
            vec![(vec![0.0], 1.0, 0.5), (vec![0.5], 1.0, 0.5)],
            vec![vec![1], vec![]],
            Model::Vacancy,
            HarmonicVariant::Gated,
            false,
        );
        assert!(r.is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let s = lattice(2, vec![3, 2], 0.37, 1.0).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: SystemState = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn handshake_on_lattices() {
        for counts in [vec![1, 1], vec![4, 3], vec![5, 1]] {
            let s = lattice(2, counts, 0.2, 1.0).unwrap();
            let total: usize = s.topology().iter().map(|n| n.len()).sum();
            assert_eq!(total % 2, 0);
            assert_eq!(total, 2 * s.edges().len());
        }
    }
}
