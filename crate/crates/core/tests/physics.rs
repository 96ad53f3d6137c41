use proptest::prelude::*;

use vllsa::actuator::LeafSpringParams;
use vllsa::fsm::ActuationMode;
use vllsa::harness::config::Config;
use vllsa::harness::metrics::compute_metrics;
use vllsa::harness::scenario::{run, setup, Scenario};
use vllsa::harness::trace::{read_trace, write_trace};

#[test]
fn energy_audit_balances_in_every_mode() {
    let config = Config::default();
    for scenario in Scenario::ALL {
        for mode in ActuationMode::ALL {
            let s = setup(&config, scenario, mode).unwrap();
            let r = run(&s, scenario).unwrap();
            let rel = r.output.audit.relative_residual();
            assert!(rel < 0.01, "{scenario} {mode}: {:?}", r.output.audit);
        }
    }
}

#[test]
fn metrics_survive_the_csv_round_trip() {
    let config = Config::default();
    let s = setup(&config, Scenario::Forward, ActuationMode::Vs).unwrap();
    let r = run(&s, Scenario::Forward).unwrap();
    let mut buf = Vec::new();
    write_trace(&mut buf, &r.output.trace).unwrap();
    let back = read_trace(buf.as_slice()).unwrap();
    assert_eq!(back, r.output.trace);
    assert_eq!(
        compute_metrics(&back, s.obstacle.as_ref()).unwrap(),
        r.metrics
    );
}

#[test]
fn energies_are_monotone_along_the_trace() {
    let config = Config::default();
    let s = setup(&config, Scenario::Inplace, ActuationMode::Cls).unwrap();
    let r = run(&s, Scenario::Inplace).unwrap();
    for w in r.output.trace.windows(2) {
        assert!(w[1].e_hip >= w[0].e_hip);
        assert!(w[1].e_knee >= w[0].e_knee);
        assert!(w[1].e_stiffness >= w[0].e_stiffness);
    }
}

proptest! {
    #[test]
    fn stiffness_rises_with_slider_position(q in 0.0f64..0.35, x in 0.0f64..0.08, dx in 1e-4f64..0.02) {
        let s = LeafSpringParams::default();
        prop_assert!(s.stiffness_at(q, x + dx) > s.stiffness_at(q, x));
        prop_assert!(s.stiffness_slope_at(q, x) > 0.0);
    }

    #[test]
    fn torque_is_odd_and_energy_even(q in 0.0f64..0.5, x in 0.0f64..0.08) {
        let s = LeafSpringParams::default();
        prop_assert_eq!(s.torque_at(-q, x), -s.torque_at(q, x));
        prop_assert_eq!(s.energy_at(-q, x), s.energy_at(q, x));
        prop_assert!(s.energy_at(q, x) >= 0.0);
        prop_assert!(s.force_at(q, x) <= 0.0);
    }

    #[test]
    fn slider_inverse_recovers_stiffness(q in 0.0f64..0.35, frac in 0.05f64..0.95) {
        let s = LeafSpringParams::default();
        let (lo, hi) = (s.stiffness_at(q, 0.0), s.stiffness_at(q, s.slider_cap()));
        let target = lo + frac * (hi - lo);
        let x = s.slider_for_stiffness(q, target).unwrap();
        prop_assert!((s.stiffness_at(q, x) / target - 1.0).abs() < 1e-9);
    }
}
