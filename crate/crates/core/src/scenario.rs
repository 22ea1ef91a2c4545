//! TOML scenario files.
//!
//! ```toml
//! seed = 7
//! functional = "f_hat_vacancy"      # optional, follows the model
//!
//! [system]
//! beta = 1.0
//! dim = 1
//! half_width = 3.0
//! model = "vacancy"
//! sites = [{ x = [-0.6], k = 2.0, c = 0.7 }, { x = [0.6], k = 2.0, c = 0.4 }]
//!
//! [potential.pair]
//! kind = "harmonic_bond"
//! stiffness = 1.0
//! length = 1.0
//!
//! [estimator]
//! kind = "pair_quadrature"
//! order = 32
//! ```
//!
//! Sites are given either as a `sites` list (with an optional `topology`,
//! a chain by default) or as a `[system.lattice]` table.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{
    build_lattice, HarmonicVariant, LatticeSpec, Model, PerSite, SiteParams, SystemState,
    ThermodynamicDomain, DEFAULT_K_MAX,
};
use crate::dynamics::DynamicsConfig;
use crate::error::{DmdError, Result};
use crate::free_energy::{
    check_compatibility, Estimator, Functional, LogDomainTerm, Objective, DEFAULT_MC_SAMPLES,
    DEFAULT_QUADRATURE_ORDER,
};
use crate::minimizer::MinimizeOptions;
use crate::oracle::OracleOptions;
use crate::potentials::Interaction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSpec {
    pub x: Vec<f64>,
    pub k: f64,
    pub c: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeLayout {
    pub counts: Vec<usize>,
    pub spacing: f64,
    pub c: PerSite,
    pub k: PerSite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub beta: f64,
    pub dim: usize,
    pub half_width: f64,
    pub model: Model,
    #[serde(default)]
    pub variant: Option<HarmonicVariant>,
    #[serde(default)]
    pub mean_field: bool,
    #[serde(default)]
    pub k_max: Option<f64>,
    #[serde(default)]
    pub sites: Vec<SiteSpec>,
    #[serde(default)]
    pub topology: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub lattice: Option<LatticeLayout>,
}

fn chain(n: usize) -> Vec<Vec<usize>> {
    (0..n)
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
        .collect()
}

impl SystemSpec {
    pub fn build(&self) -> Result<SystemState> {
        let domain = ThermodynamicDomain::new(self.beta, self.dim, self.half_width)?;
        let variant = self.variant.unwrap_or(HarmonicVariant::default_for(self.model));
        let k_max = self.k_max.unwrap_or(DEFAULT_K_MAX);
        match (&self.lattice, self.sites.is_empty()) {
            (Some(_), false) => Err(DmdError::Config(
                "system: give either `sites` or `lattice`, not both".into(),
            )),
            (None, true) => Err(DmdError::Config("system: no sites".into())),
            (Some(lat), true) => {
                if self.topology.is_some() {
                    return Err(DmdError::Config(
                        "system: a lattice defines its own topology".into(),
                    ));
                }
                let spec = LatticeSpec {
                    dim: self.dim,
                    counts: lat.counts.clone(),
                    spacing: lat.spacing,
                    c: lat.c.clone(),
                    k: lat.k.clone(),
                };
                let s = build_lattice(&spec, domain.clone(), self.model, variant, self.mean_field)?;
                if k_max == DEFAULT_K_MAX {
                    return Ok(s);
                }
                let params = s.sites().iter().map(|x| (x.x.clone(), x.k, x.c)).collect();
                SystemState::with_k_max(
                    domain,
                    params,
                    s.topology().to_vec(),
                    self.model,
                    variant,
                    self.mean_field,
                    k_max,
                )
            }
            (None, false) => {
                let params: Vec<SiteParams> = self.sites.iter().map(|s| (s.x.clone(), s.k, s.c)).collect();
                let topology = self.topology.clone().unwrap_or_else(|| chain(params.len()));
                SystemState::with_k_max(domain, params, topology, self.model, variant, self.mean_field, k_max)
            }
        }
    }
}

/// Estimator as written in a scenario; Monte Carlo takes the scenario seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorSpec {
    MonteCarlo {
        #[serde(default = "default_samples")]
        samples: usize,
    },
    PairQuadrature {
        #[serde(default = "default_order")]
        order: usize,
        #[serde(default)]
        panel_width: Option<f64>,
    },
}

fn default_samples() -> usize {
    DEFAULT_MC_SAMPLES
}

fn default_order() -> usize {
    DEFAULT_QUADRATURE_ORDER
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        EstimatorSpec::PairQuadrature {
            order: DEFAULT_QUADRATURE_ORDER,
            panel_width: None,
        }
    }
}

impl EstimatorSpec {
    pub fn resolve(&self, seed: u64) -> Estimator {
        match *self {
            EstimatorSpec::MonteCarlo { samples } => Estimator::MonteCarlo { samples, seed },
            EstimatorSpec::PairQuadrature { order, panel_width } => {
                Estimator::PairQuadrature { order, panel_width }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
    pub csv: bool,
    pub json: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            csv: true,
            json: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSpec {
    pub sweep: Vec<f64>,
    /// Functional evaluated alongside `f_2011`.
    pub functional: Option<Functional>,
}

impl Default for CompareSpec {
    fn default() -> Self {
        Self {
            sweep: vec![4.0, 8.0, 16.0, 32.0],
            functional: None,
        }
    }
}

/// Test hook: overwrite one cached `mu_hat` after construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub site: usize,
    pub mu_hat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    pub system: SystemSpec,
    pub potential: Interaction,
    #[serde(default)]
    pub functional: Option<Functional>,
    #[serde(default)]
    pub estimator: EstimatorSpec,
    #[serde(default)]
    pub log_domain: LogDomainTerm,
    #[serde(default)]
    pub minimize: MinimizeOptions,
    #[serde(default)]
    pub dynamics: Option<DynamicsConfig>,
    #[serde(default)]
    pub oracle: Option<OracleOptions>,
    #[serde(default)]
    pub compare: CompareSpec,
    #[serde(default)]
    pub outputs: OutputSpec,
    #[serde(default)]
    pub fault: Option<FaultSpec>,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DmdError::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DmdError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DmdError::Config(e.to_string()))
    }

    pub fn functional(&self) -> Functional {
        let variant = self
            .system
            .variant
            .unwrap_or(HarmonicVariant::default_for(self.system.model));
        self.functional
            .unwrap_or(Functional::natural_for(self.system.model, variant))
    }

    pub fn estimator(&self) -> Estimator {
        self.estimator.resolve(self.seed)
    }

    pub fn objective(&self) -> Objective<'_> {
        Objective::new(&self.potential, self.functional(), self.estimator()).with_log_domain(self.log_domain)
    }

    /// Builds the initial state and checks it against the functional and
    /// estimator before any computation.
    pub fn build_state(&self) -> Result<SystemState> {
        let mut state = self.system.build()?;
        self.minimize.validate()?;
        if let Some(d) = &self.dynamics {
            d.validate()?;
        }
        if let Some(o) = &self.oracle {
            o.validate()?;
        }
        check_compatibility(&state, &self.potential, self.functional(), &self.estimator())?;
        if let Some(f) = self.fault {
            if f.site >= state.n_sites() {
                return Err(DmdError::Config(format!("fault: no site {}", f.site)));
            }
            state.corrupt_mu_hat(f.site, f.mu_hat);
        }
        Ok(state)
    }
}
