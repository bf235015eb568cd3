//! Bound calculators against 50-digit reference evaluations.
#![allow(clippy::excessive_precision, clippy::approx_constant)]

use maxmatch_core::theory::*;
use maxmatch_core::Error;
use proptest::prelude::*;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn assert_rel(got: f64, want: f64, what: &str) {
    assert!(rel(got, want) < 1e-9, "{what}: got {got}, want {want}");
}

fn small_config() -> BoundConfig {
    BoundConfig {
        eps: 0.1,
        delta: 0.01,
        n_labeled: 250.0,
        n_unlabeled: 4000.0,
        n_classes: 2.0,
        k: 3.0,
        params: 4418.0,
        params_single: 4290.0,
        chi: 1.2,
        chi_tau: 1.9,
        beta_dist: 0.5,
        nu: 0.1,
        c0: 1.0,
    }
}

#[test]
fn constants_reference() {
    let (c1, c2) = constants(10.0, 0.05).unwrap();
    assert_rel(c1, 38.991451492447378697, "c1");
    assert_rel(c2, 1.4426950408889634074, "c2");
}

#[test]
fn multi_output_worked_example() {
    let v = rademacher_multi_bound(1e4, 10.0, 1e5, 1.0, 2.0, 0.0).unwrap();
    assert_rel(v, 35.721622815384194777, "worked example");
    let v = rademacher_multi_bound(500.0, 2.0, 4000.0, 2.5, 1.0, 0.5).unwrap();
    assert_rel(v, 59.574095433067367821, "second instance");
}

#[test]
fn single_output_reference() {
    assert_rel(
        rademacher_single_bound(5e4, 1e4, 1.0, 2.0, 0.0).unwrap(),
        20.03911848867248015,
        "raw inputs",
    );
    assert_rel(
        rademacher_single_bound(5e4, 1e4, 1.7, 2.0, 0.0).unwrap(),
        20.417195937338245414,
        "transformed inputs",
    );
}

#[test]
fn psi_reference() {
    let small = rademacher_multi_bound(40.0, 10.0, 1e5, 1.0, 2.0, 0.0).unwrap();
    assert_rel(
        psi_big(40.0, 10.0, 0.05, small).unwrap(),
        54788.342504862109604,
        "psi",
    );
}

#[test]
fn full_bound_reference_default() {
    let r = generalization_bound(&BoundConfig::default(), 0.12, 0.34).unwrap();
    assert_rel(r.psi_small, 468.59769879878319557, "psi_small");
    assert_rel(r.psi_big, 54788.342504862109604, "psi_big");
    assert_rel(r.k_summand, 5630120.5318484797161, "k_summand");
    assert_rel(r.c_m, 22.167168296791950682, "c_m");
    assert_rel(r.total, 5748699.1280062356464, "total");
}

#[test]
fn full_bound_reference_small() {
    let r = generalization_bound(&small_config(), 0.05, 0.2).unwrap();
    assert_rel(r.psi_small, 78.67652902711402575, "psi_small");
    assert_rel(r.psi_big, 4312.4772865945068947, "psi_big");
    assert_rel(r.k_summand, 413214.90883837457578, "k_summand");
    assert_rel(
        r.c_m,
        8.9801054893248141143,
        "c_m uses the larger input radius",
    );
    assert_rel(r.total, 422560.78879793767003, "total");
}

#[test]
fn general_bound_reference() {
    let (c1, c2) = constants(10.0, 0.05).unwrap();
    let v = assemble_general_bound(&GeneralBoundInputs {
        c1,
        c2,
        risk_labeled: 0.2,
        risk_unlabeled: 0.3,
        rad_labeled: 0.1,
        rad_unlabeled: 0.05,
        n_labeled: 40.0,
        n_unlabeled: 5e4,
        delta: 0.05,
    })
    .unwrap();
    assert_rel(v, 17.960943013379189587, "assembly");
}

#[test]
fn vacuous_and_invalid_inputs_are_config_errors() {
    assert!(matches!(
        rademacher_single_bound(0.1, 10.0, 0.1, 0.0, 0.0),
        Err(Error::Config(_))
    ));
    let bad = BoundConfig {
        eps: 0.7,
        ..BoundConfig::default()
    };
    assert!(matches!(
        generalization_bound(&bad, 0.1, 0.1),
        Err(Error::Config(_))
    ));
    assert!(generalization_bound(&BoundConfig::default(), -0.1, 0.0).is_err());
}

#[test]
fn sweep_setter_rejects_unknown_fields() {
    let mut c = BoundConfig::default();
    c.set("n-unlabeled", 123.0).unwrap();
    assert_eq!(c.n_unlabeled, 123.0);
    assert!(c.set("gamma", 1.0).is_err());
}

#[test]
fn report_round_trips_through_json() {
    let r = generalization_bound(&small_config(), 0.05, 0.2).unwrap();
    let back: BoundReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(r, back);
}

proptest! {
    #[test]
    fn k_term_is_linear_in_k(k in 1.0f64..64.0) {
        let base = BoundConfig::default();
        let a = generalization_bound(&BoundConfig { k, ..base.clone() }, 0.1, 0.1).unwrap();
        let b = generalization_bound(&BoundConfig { k: 2.0 * k, ..base }, 0.1, 0.1).unwrap();
        prop_assert!((b.k_summand / a.k_summand - 2.0).abs() < 1e-12);
    }

    #[test]
    fn k_term_decreases_with_more_unlabeled_data(n_u in 1e3f64..1e6) {
        let base = BoundConfig::default();
        let a = generalization_bound(&BoundConfig { n_unlabeled: n_u, ..base.clone() }, 0.1, 0.1).unwrap();
        let b = generalization_bound(&BoundConfig { n_unlabeled: 100.0 * n_u, ..base }, 0.1, 0.1).unwrap();
        prop_assert!(b.k_summand < a.k_summand);
    }

    #[test]
    fn total_is_sum_of_terms(rl in 0.0f64..3.0, ru in 0.0f64..3.0) {
        let r = generalization_bound(&small_config(), rl, ru).unwrap();
        let sum = r.term_unlabeled_risk + r.term_labeled_risk
            + r.term_unlabeled_complexity + r.term_labeled_complexity;
        prop_assert!((r.total - sum).abs() <= 1e-12 * r.total);
        prop_assert!((r.term_unlabeled_complexity - r.k_summand - r.unlabeled_deviation).abs() <= 1e-9 * r.total);
    }

    #[test]
    fn simplex_weights_match_max(v in prop::collection::vec(-10.0f64..10.0, 1..12)) {
        let (w, val) = max_simplex_weights(&v).unwrap();
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(val, max);
        prop_assert_eq!(w.iter().sum::<f64>(), 1.0);
        prop_assert!(w.iter().all(|&x| x == 0.0 || x == 1.0));
    }
}
