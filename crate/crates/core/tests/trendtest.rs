mod common;

use common::{assert_close, load, table};
use proptest::prelude::*;
use trendlab::data::{DoseResponseTable, Scaling};
use trendlab::glm::{InfluenceUnit, Link};
use trendlab::trendtest::{
    ca_test, double_max_test, joint_regression_williams_test, overdispersed_trend_test, tukey_trend_test, Alternative,
    PseudoCount, PseudoCounts, TestOptions, TrendReport,
};
use trendlab::Error;

const MVN_SLACK: f64 = 2e-5;

fn check_report(r: &TrendReport) {
    let m = r.m as f64;
    assert_eq!(r.components.len(), r.m);
    for c in &r.components {
        assert!(c.raw_p <= c.adjusted_p + MVN_SLACK, "{}", c.label);
        assert!(c.adjusted_p <= (m * c.raw_p).min(1.0) + MVN_SLACK, "{}", c.label);
        if let Some(lower) = c.lower {
            assert!(lower <= c.estimate);
        }
        if let Some(upper) = c.upper {
            assert!(upper >= c.estimate);
        }
    }
    let min = r.components.iter().map(|c| c.adjusted_p).fold(f64::INFINITY, f64::min);
    assert_eq!(r.best_component().label, r.best);
    assert!(r.best_component().adjusted_p <= min * (1.0 + 1e-6));
    let first = r.components.iter().position(|c| c.adjusted_p <= min * (1.0 + 1e-6)).unwrap();
    assert_eq!(r.best_index, first);
}

#[test]
fn ca_examples() {
    let r = ca_test(&table(&[0.0, 1.0], &[1, 3], &[10, 10]), Alternative::Greater, false).unwrap();
    assert_close(r.statistic, 1.0 / (0.2f64 * 0.8 * 5.0).sqrt(), 1e-12);
    assert_close(r.p_value, 0.1318, 1e-4);
    let r = ca_test(&table(&[0.0, 1.0], &[2, 2], &[10, 10]), Alternative::Greater, false).unwrap();
    assert_eq!((r.statistic, r.p_value), (0.0, 0.5));
    let r = ca_test(&load("acrylamide.csv"), Alternative::Greater, false).unwrap();
    assert!(r.statistic > 0.0 && r.p_value < 0.01, "{r:?}");
    assert!(matches!(
        ca_test(&table(&[0.0, 1.0], &[10, 10], &[10, 10]), Alternative::Greater, false),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn ca_is_affine_invariant() {
    let t = load("acrylamide.csv");
    let base = ca_test(&t, Alternative::TwoSided, false).unwrap();
    let moved: Vec<f64> = t.doses().iter().map(|d| 3.7 * d + 12.0).collect();
    let events: Vec<u64> = t.rows().iter().map(|r| r.events).collect();
    let trials: Vec<u64> = t.rows().iter().map(|r| r.trials).collect();
    let r = ca_test(&table(&moved, &events, &trials), Alternative::TwoSided, false).unwrap();
    assert_close(r.statistic, base.statistic, 1e-10);
}

#[test]
fn acrylamide_logit_prefers_ordinal() {
    let opts = TestOptions { pseudo_counts: PseudoCounts::uniform(PseudoCount::Always(0.5)), ..TestOptions::default() };
    let r = tukey_trend_test(&load("acrylamide.csv"), Link::Logit, &Scaling::ALL, &opts).unwrap();
    check_report(&r);
    let ps: Vec<f64> = r.components.iter().map(|c| c.adjusted_p).collect();
    assert!(ps.iter().all(|&p| p < 0.01), "{ps:?}");
    assert!(r.best == "OR:ord" || r.best == "OR:log");
    let ord = r.component("OR:ord").unwrap();
    assert_close(ord.estimate_effect, 1.70, 0.01);
    assert_close(ord.lower_effect.unwrap(), 1.18, 0.01);
    assert_eq!(r.seed, 20240101);
}

#[test]
fn one_component_equals_raw_p() {
    let t = load("flutrimazole.csv");
    for link in Link::ALL {
        let r = tukey_trend_test(&t, link, &[Scaling::Arithmetic], &TestOptions::default()).unwrap();
        let c = &r.components[0];
        assert_eq!(r.m, 1);
        assert_close(c.adjusted_p, c.raw_p, MVN_SLACK);
        let d = double_max_test(&t, &[link], &[Scaling::Arithmetic], &TestOptions::default()).unwrap();
        assert_eq!(d.components[0].label, c.label);
        assert_close(d.components[0].statistic, c.statistic, 1e-12);
        assert_close(d.components[0].adjusted_p, c.adjusted_p, MVN_SLACK);
    }
}

#[test]
fn double_max_restricted_to_one_link_matches_tukey() {
    let t = load("acrylamide.csv");
    let opts = TestOptions::default();
    let tukey = tukey_trend_test(&t, Link::Identity, &Scaling::ALL, &opts).unwrap();
    let double = double_max_test(&t, &[Link::Identity], &Scaling::ALL, &opts).unwrap();
    for (a, b) in tukey.components.iter().zip(&double.components) {
        assert_eq!(a.label, b.label);
        assert_close(a.adjusted_p, b.adjusted_p, MVN_SLACK);
    }
}

#[test]
fn acrylamide_double_max_prefers_risk_difference() {
    let opts = TestOptions { pseudo_counts: "logit=0.5,identity=0.5,log=0".parse().unwrap(), ..TestOptions::default() };
    let r = double_max_test(&load("acrylamide.csv"), &Link::ALL, &Scaling::ALL, &opts).unwrap();
    check_report(&r);
    assert_eq!(r.m, 9);
    assert!(r.best.starts_with("RD:"), "{}", r.best);
    assert!(r.best_component().adjusted_p < 0.005);
}

#[test]
fn flat_data_is_never_significant() {
    let t = table(&[0.0, 1.0, 2.0, 4.0], &[5, 5, 5, 5], &[20, 20, 20, 20]);
    let r = double_max_test(&t, &Link::ALL, &Scaling::ALL, &TestOptions::default()).unwrap();
    check_report(&r);
    assert_eq!(r.influence_unit, InfluenceUnit::Subject);
    assert!(r.components.iter().all(|c| c.adjusted_p >= 0.49), "{:?}", r.components);
    let j = joint_regression_williams_test(&t, Link::Logit, &Scaling::ALL, &TestOptions::default()).unwrap();
    check_report(&j);
    assert!(j.components.iter().all(|c| c.adjusted_p >= 0.05));
}

#[test]
fn two_group_joint_duplicates_the_slope() {
    let t = table(&[1.0, 2.0], &[6, 13], &[25, 25]);
    let r = joint_regression_williams_test(&t, Link::Logit, &Scaling::ALL, &TestOptions::default()).unwrap();
    check_report(&r);
    assert_eq!(r.m, 4);
    let williams = r.component("Williams: 1 vs 2").unwrap();
    let slope = r.component("OR:ord").unwrap();
    assert_close(slope.statistic, williams.statistic, 1e-8);
    assert_close(slope.adjusted_p, williams.adjusted_p, MVN_SLACK);
}

#[test]
fn flutrimazole_joint_test_orders_components() {
    let r =
        joint_regression_williams_test(&load("flutrimazole.csv"), Link::Logit, &Scaling::ALL, &TestOptions::default())
            .unwrap();
    check_report(&r);
    assert_eq!(r.m, 6);
    let labels: Vec<&str> = r.components.iter().map(|c| c.label.as_str()).collect();
    assert_eq!(&labels[..3], ["OR:ari", "OR:ord", "OR:log"]);
    assert!(labels[3..].iter().all(|l| l.starts_with("Williams: ")));
    assert!(r.best.starts_with("Williams: "));
}

#[test]
fn orobanche_decreases_on_the_arithmetic_scale() {
    let opts = TestOptions { alternative: Alternative::Less, ..TestOptions::default() };
    let r = overdispersed_trend_test(&load("orobanche.csv"), &Scaling::ALL, &opts).unwrap();
    check_report(&r);
    assert_eq!(r.best, "OR:ari");
    assert!(r.best_component().adjusted_p < 0.01);
    for c in &r.components {
        assert!(c.upper.is_some() && c.lower.is_none());
        assert_eq!(Some(c.dispersion), c.pearson_dispersion);
    }
}

#[test]
fn quasi_binomial_widens_errors_when_overdispersed() {
    let t = load("orobanche.csv");
    let opts = TestOptions { alternative: Alternative::Less, ..TestOptions::default() };
    let quasi = overdispersed_trend_test(&t, &[Scaling::Ordinal], &opts).unwrap();
    let binomial = tukey_trend_test(&t, Link::Logit, &[Scaling::Ordinal], &opts).unwrap();
    let (q, b) = (&quasi.components[0], &binomial.components[0]);
    assert!(q.dispersion > 1.0);
    assert!(b.std_error < q.std_error);
    assert_close(q.std_error, b.std_error * q.dispersion.sqrt(), 1e-10);
}

#[test]
fn collapsed_replicates_have_no_residual_df() {
    let t = load("orobanche.csv").collapse();
    let err = overdispersed_trend_test(&t, &Scaling::ALL, &TestOptions::default()).unwrap_err();
    assert!(matches!(err, Error::DegreesOfFreedom { .. }));
}

#[test]
fn invalid_options_are_rejected() {
    let t = load("acrylamide.csv");
    assert!(tukey_trend_test(&t, Link::Logit, &[], &TestOptions::default()).is_err());
    let opts = TestOptions { level: 1.0, ..TestOptions::default() };
    assert!(tukey_trend_test(&t, Link::Logit, &Scaling::ALL, &opts).is_err());
    assert!(double_max_test(&t, &[], &Scaling::ALL, &TestOptions::default()).is_err());
}

fn random_table() -> impl Strategy<Value = DoseResponseTable> {
    (3usize..=5).prop_flat_map(|k| {
        (prop::collection::vec(1u64..40, k), prop::collection::vec(40u64..60, k)).prop_map(move |(events, trials)| {
            let doses: Vec<f64> = (0..k).map(|i| [0.0, 0.5, 1.0, 2.5, 5.0][i]).collect();
            let events: Vec<u64> = events.iter().zip(&trials).map(|(e, n)| (*e).min(n - 1)).collect();
            DoseResponseTable::from_counts(&doses, &events, &trials).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn reversing_doses_flips_the_ordinal_statistic(t in random_table()) {
        let top = t.doses().iter().copied().fold(0.0, f64::max);
        let rows = t.rows().iter().map(|r| {
            let mut r = r.clone();
            r.dose = top - r.dose;
            r
        }).collect();
        let reversed = DoseResponseTable::new(rows).unwrap();
        let up = TestOptions::default();
        let down = TestOptions { alternative: Alternative::Less, ..up };
        let a = tukey_trend_test(&t, Link::Logit, &[Scaling::Ordinal], &up).unwrap();
        let b = tukey_trend_test(&reversed, Link::Logit, &[Scaling::Ordinal], &down).unwrap();
        prop_assert!((a.components[0].statistic + b.components[0].statistic).abs() < 1e-8);
        prop_assert!((a.components[0].adjusted_p - b.components[0].adjusted_p).abs() < 1e-8);
    }

    #[test]
    fn reports_respect_their_invariants(t in random_table(), two_sided in any::<bool>()) {
        let alternative = if two_sided { Alternative::TwoSided } else { Alternative::Greater };
        let opts = TestOptions { alternative, ..TestOptions::default() };
        let r = tukey_trend_test(&t, Link::Logit, &Scaling::ALL, &opts).unwrap();
        check_report(&r);
        if !two_sided {
            let max_t = r.components.iter().map(|c| c.statistic).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(r.best_component().statistic >= max_t - 1e-6 * max_t.abs().max(1.0));
        }
    }
}
