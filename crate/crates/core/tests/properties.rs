mod common;

use dmdkit::ensemble;
use dmdkit::free_energy::{Functional, Objective};
use dmdkit::oracle::run_oracle;
use dmdkit::scenario::Scenario;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gibbs_bogoliubov_on_small_systems(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let sys = loop {
            let s = common::random_system(&mut rng);
            if s.state.n_sites() * s.state.dim() <= 2 {
                break s;
            }
        };
        let o = run_oracle(&sys.state, &sys.interaction, &common::oracle_options(&sys.state)).unwrap();
        let f = Functional::natural_for(sys.state.model(), sys.state.variant());
        let f_hat = Objective::new(&sys.interaction, f, common::estimator(&sys.state))
            .evaluate(&sys.state)
            .unwrap()
            .value;
        let tol = 1e-6 * f_hat.abs().max(1.0) + o.quadrature_error_estimate;
        prop_assert!(o.relative_entropy >= -tol, "{}: R = {}", sys.label, o.relative_entropy);
        prop_assert!(f_hat >= o.f_exact - tol, "{}", sys.label);
        prop_assert!((o.rn_normalization - 1.0).abs() <= o.rn_normalization_error + 1e-10);
    }

    #[test]
    fn closed_forms_are_consistent(seed in any::<u64>()) {
        let sys = common::random_system(&mut common::rng(seed));
        let (a, b) = ensemble::partition_hat_forms(&sys.state);
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        for i in 0..sys.state.n_sites() {
            let e = ensemble::occupancy_expectation(&sys.state, i);
            prop_assert!((e - sys.state.site(i).c).abs() <= 1e-12);
        }
    }
}

#[test]
fn shipped_scenarios_build() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let s = Scenario::from_path(&path).unwrap();
            s.build_state().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 4);
}
