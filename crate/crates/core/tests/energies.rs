mod common;

use lace_core::energy::{
    cond_energy_discrete, AlphaPolicy, EnergyExpr, ExprEnergy, LatentEnergy, Node, LN_20,
};
use lace_core::rng::Stream;
use lace_core::worldgen::{AttrValue, World, WorldConfig};
use proptest::prelude::*;

#[test]
fn discrete_energy_is_a_normalised_negative_log_probability() {
    let mut rng = Stream::new(9);
    for _ in 0..1000 {
        let k = 2 + rng.below(9);
        let logits: Vec<f64> = (0..k).map(|_| 5.0 * rng.normal()).collect();
        for t in [0.5, 1.0, 2.0] {
            let total: f64 = (0..k)
                .map(|c| (-cond_energy_discrete(&logits, c, t).unwrap()).exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-12, "sum {total}");
        }
    }
}

proptest! {
    #[test]
    fn discrete_energy_ignores_logit_shifts(
        logits in prop::collection::vec(-20.0f64..20.0, 2..6),
        shift in -500.0f64..500.0,
        t in 0.2f64..5.0,
    ) {
        let shifted: Vec<f64> = logits.iter().map(|f| f + shift).collect();
        for c in 0..logits.len() {
            let a = cond_energy_discrete(&logits, c, t).unwrap();
            let b = cond_energy_discrete(&shifted, c, t).unwrap();
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
            prop_assert!(a >= 0.0);
        }
    }
}

#[test]
fn and_is_additive_and_or_lies_between_min_and_soft_bound() {
    let (world, model) = common::trained_plane();
    let g = &world.generator;
    let spec = &world.spec;
    let model = &model;
    let energy = |text: &str| {
        let e = EnergyExpr::parse(text, spec).unwrap();
        move |z: &[f64]| ExprEnergy::new(&e, model, g).unwrap().cond_value(z).unwrap()
    };
    let a = energy("attr0=1");
    let b = energy("attr1=2");
    let both = energy("AND(attr0=1, attr1=2)");
    let either = energy("OR(attr0=1, attr1=2; beta=0)");
    let mut rng = Stream::new(3);
    for _ in 0..200 {
        let z = rng.normal_vec(2);
        let (ea, eb) = (a(&z), b(&z));
        assert!((both(&z) - ea - eb).abs() < 1e-9);
        // -log(e^-a + e^-b) lies in [min - ln 2, min].
        let or = either(&z);
        let m = ea.min(eb);
        assert!(or <= m + 1e-12 && or >= m - 2f64.ln() - 1e-12);
    }
}

#[test]
fn or_bias_prefers_the_first_disjunct() {
    let world = World::benchmark(&WorldConfig::plane()).unwrap();
    let model = common::zero_model(&world);
    let leaf = |c| Node::leaf(0, AttrValue::Category(c));
    let biased = EnergyExpr::new(Node::or(vec![leaf(1), leaf(0)], LN_20));
    let plain = EnergyExpr::new(Node::or(vec![leaf(1), leaf(0)], 0.0));
    let e = |x: &EnergyExpr| {
        ExprEnergy::new(x, &model, &world.generator)
            .unwrap()
            .cond_value(&[0.0, 0.0])
            .unwrap()
    };
    // Uniform logits: both leaves cost ln 2.
    let ln2 = 2f64.ln();
    assert!((e(&plain) - (ln2 - ln2)).abs() < 1e-12);
    assert!((e(&biased) - (ln2 - 21f64.ln())).abs() < 1e-12);
}

#[test]
fn fixed_alpha_not_is_a_weighted_difference() {
    let (world, model) = common::trained_plane();
    let spec = &world.spec;
    let g = &world.generator;
    let cond = |text: &str, z: &[f64]| {
        let e = EnergyExpr::parse(text, spec).unwrap();
        ExprEnergy::new(&e, &model, g).unwrap().cond_value(z).unwrap()
    };
    let mut rng = Stream::new(12);
    for _ in 0..50 {
        let z = rng.normal_vec(2);
        let not = cond("NOT(attr0=1, attr1=3; alpha=0.4)", &z);
        let expected = cond("attr0=1", &z) - 0.4 * cond("attr1=3", &z);
        assert!((not - expected).abs() < 1e-10);
        let e2 = cond("attr1=3", &z);
        let adaptive = cond("NOT(attr0=1, attr1=3)", &z);
        let alpha = AlphaPolicy::Adaptive.alpha(e2);
        assert!(alpha <= 1.0 && alpha * e2.abs() <= 0.1 + 1e-12);
        assert!((adaptive - (cond("attr0=1", &z) - alpha * e2)).abs() < 1e-10);
    }
}

#[test]
fn display_parses_back_to_the_same_expression() {
    let world = World::benchmark(&WorldConfig::plane()).unwrap();
    for text in [
        "attr0=1",
        "attr0=0, attr2=0.25",
        "AND(attr0=1, OR(attr1=2, attr2=0.7; beta=ln20), NOT(attr0=1, attr1=0; alpha=adaptive))",
        "OR(attr1=0[T=2], attr1=3[w=0.5]; beta=0)",
        "NOT(OR(attr0=1, attr1=1), attr2=0.9[T=3,w=2]; alpha=0.25)",
    ] {
        let e = EnergyExpr::parse(text, &world.spec).unwrap();
        let shown = e.display(&world.spec).to_string();
        let again = EnergyExpr::parse(&shown, &world.spec).unwrap();
        assert_eq!(e, again, "{text} -> {shown}");
        assert_eq!(shown, again.display(&world.spec).to_string());
    }
}

#[test]
fn parse_errors_carry_positions() {
    let world = World::benchmark(&WorldConfig::plane()).unwrap();
    for (text, at) in [("attr0=", 6), ("AND(attr0=1", 11), ("attr9=1", 0), ("OR(attr0=1; gamma=2)", 11)] {
        match EnergyExpr::parse(text, &world.spec) {
            Err(lace_core::Error::Parse { position, .. }) => {
                assert!(position <= text.len());
                assert!(position.abs_diff(at) <= 6, "{text}: position {position}");
            }
            other => panic!("{text}: expected a parse error, got {other:?}"),
        }
    }
}
