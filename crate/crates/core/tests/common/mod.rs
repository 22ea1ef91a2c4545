//! Random small systems shared by the integration tests.
#![allow(dead_code)]

use dmdkit::domain::{HarmonicVariant, Model, SystemState, ThermodynamicDomain};
use dmdkit::free_energy::Estimator;
use dmdkit::oracle::OracleOptions;
use dmdkit::potentials::{AlloyPotentialSpec, Interaction, PairPotentialSpec};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct RandomSystem {
    pub state: SystemState,
    pub interaction: Interaction,
    pub label: String,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn all_pairs(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect()
}

/// Smooth enough for tensor Gauss-Legendre: no cutoffs, a soft inner clamp
/// for Lennard-Jones, bonds without the `r = 0` kink.
pub fn random_pair(rng: &mut ChaCha8Rng) -> PairPotentialSpec {
    match rng.gen_range(0..3) {
        0 => {
            let sigma = rng.gen_range(0.5..0.8);
            PairPotentialSpec::lennard_jones(rng.gen_range(0.05..0.5), sigma, None, false).with_inner(0.85 * sigma)
        }
        1 => PairPotentialSpec::morse(
            rng.gen_range(0.1..1.0),
            rng.gen_range(0.6..1.2),
            rng.gen_range(0.8..1.5),
            None,
            false,
        ),
        _ => PairPotentialSpec::harmonic_bond(rng.gen_range(0.2..1.0), 0.0, None, false),
    }
}

/// A system with `N <= 3`, `d <= 2`, either model, moderate couplings.
pub fn random_system(rng: &mut ChaCha8Rng) -> RandomSystem {
    let dim = rng.gen_range(1..=2);
    let n = rng.gen_range(1..=3);
    let beta = rng.gen_range(0.5..1.5);
    let l = rng.gen_range(1.5..2.5);
    let binary = rng.gen_bool(0.3);
    let model = if binary { Model::Binary } else { Model::Vacancy };
    let mean_field = !binary && rng.gen_bool(0.3);
    let sites = (0..n)
        .map(|_| {
            let x = (0..dim).map(|_| rng.gen_range(-0.6 * l..0.6 * l)).collect();
            let k = if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.3..4.0) };
            (x, k, rng.gen_range(0.1..0.9))
        })
        .collect();
    let interaction = if binary {
        Interaction::Alloy(AlloyPotentialSpec {
            aa: random_pair(rng),
            ab: random_pair(rng),
            bb: random_pair(rng),
        })
    } else {
        Interaction::Pair(random_pair(rng))
    };
    let domain = ThermodynamicDomain::new(beta, dim, l).unwrap();
    let state = SystemState::new(
        domain,
        sites,
        all_pairs(n),
        model,
        HarmonicVariant::default_for(model),
        mean_field,
    )
    .unwrap();
    let label = format!("N={n} d={dim} {model:?} mf={mean_field} beta={beta:.3} L={l:.3}");
    RandomSystem {
        state,
        interaction,
        label,
    }
}

/// Oracle orders that keep the true-ensemble grid near a million nodes.
pub fn oracle_options(state: &SystemState) -> OracleOptions {
    let quad_order = match state.n_sites() * state.dim() {
        0..=2 => 64,
        3 => 48,
        4 => 32,
        5 => 16,
        _ => 12,
    };
    OracleOptions {
        quad_order,
        pair_order: if state.dim() == 1 { 64 } else { 32 },
        ..OracleOptions::default()
    }
}

/// Pair-quadrature estimator sized to the system.
pub fn estimator(state: &SystemState) -> Estimator {
    Estimator::PairQuadrature {
        order: if state.dim() == 1 { 64 } else { 32 },
        panel_width: None,
    }
}
