//! Exact gradients against central finite differences over random worlds
//! and expressions of every kind.

use lace_core::classifier::{ClassifierMode, ClassifierModel, InputSpace};
use lace_core::energy::{
    AlphaPolicy, EditState, EditWeights, EnergyExpr, ExprEnergy, LatentEnergy, Leaf, Node,
    SeqEditEnergy, LN_20,
};
use lace_core::oracle::{finite_diff_grad, relative_error};
use lace_core::rng::Stream;
use lace_core::worldgen::{AttrValue, AttributeKind, GeneratorKind, World, WorldConfig};

const KINDS: [&str; 5] = ["leaf", "and", "or", "not", "edit"];

fn random_world(rng: &mut Stream, case: usize) -> (World, ClassifierModel) {
    let generator = [GeneratorKind::Identity, GeneratorKind::Linear, GeneratorKind::SmallMlp][case % 3];
    let latent_dim = 2 + rng.below(5);
    let data_dim = match generator {
        GeneratorKind::Identity => latent_dim,
        _ => latent_dim + rng.below(3),
    };
    let world = World::benchmark(&WorldConfig {
        latent_dim,
        data_dim,
        generator,
        seed: 100 + case as u64,
    })
    .unwrap();
    let space = match (generator, rng.below(3)) {
        (_, 0) => InputSpace::Latent,
        (GeneratorKind::SmallMlp, 1) => InputSpace::Intermediate,
        _ => InputSpace::Data,
    };
    let mode = if rng.below(2) == 0 {
        ClassifierMode::Separate
    } else {
        ClassifierMode::SingleTrunk
    };
    let input_dim = space.dim(&world.generator).unwrap();
    let model = ClassifierModel::init(&world.spec, mode, space, input_dim, case as u64).unwrap();
    (world, model)
}

fn random_value(world: &World, attr: usize, rng: &mut Stream) -> AttrValue {
    match world.spec.get(attr).kind {
        AttributeKind::Discrete { categories } => AttrValue::Category(rng.below(categories)),
        AttributeKind::Continuous => AttrValue::Level(rng.uniform()),
    }
}

fn random_leaf(world: &World, rng: &mut Stream) -> Node {
    let attr = rng.below(world.spec.len());
    Node::Leaf(Leaf {
        temperature: [0.5, 1.0, 2.0][rng.below(3)],
        weight: 0.5 + rng.uniform(),
        ..Leaf::new(attr, random_value(world, attr, rng))
    })
}

fn check(energy: &dyn LatentEnergy, z: &[f64], label: &str) {
    let (_, grad) = energy.value_grad(z).unwrap();
    let fd = finite_diff_grad(|p| energy.value(p).unwrap(), z, 1e-5);
    for (k, (a, b)) in grad.iter().zip(&fd).enumerate() {
        let err = relative_error(*a, *b);
        assert!(err < 1e-5, "{label}: component {k}: exact {a} vs fd {b} (rel {err:e})");
    }
}

#[test]
fn hundred_random_cases_match_finite_differences() {
    let mut rng = Stream::new(2024);
    for case in 0..100 {
        let (world, model) = random_world(&mut rng, case);
        let g = &world.generator;
        let z = rng.normal_vec(world.latent_dim());
        let kind = KINDS[case % KINDS.len()];
        let label = format!("case {case} ({kind})");
        if kind == "edit" {
            let stages = 1 + rng.below(3);
            let edits = (0..stages)
                .map(|_| {
                    let a = rng.below(world.spec.len());
                    (a, random_value(&world, a, &mut rng))
                })
                .collect();
            let z_prev: Vec<f64> = z.iter().map(|v| v + 0.3 * rng.normal()).collect();
            let state = EditState {
                z_prev,
                edits,
                weights: EditWeights::default(),
                sigma_sq: 0.01,
            };
            check(&SeqEditEnergy::new(&state, &model, g).unwrap(), &z, &label);
            continue;
        }
        let root = match kind {
            "leaf" => random_leaf(&world, &mut rng),
            "and" => Node::And((0..2 + rng.below(2)).map(|_| random_leaf(&world, &mut rng)).collect()),
            "or" => Node::or(
                vec![random_leaf(&world, &mut rng), random_leaf(&world, &mut rng)],
                LN_20,
            ),
            _ => Node::not(
                random_leaf(&world, &mut rng),
                random_leaf(&world, &mut rng),
                AlphaPolicy::Fixed(0.1 + 0.9 * rng.uniform()),
            ),
        };
        let expr = EnergyExpr::new(root);
        check(&ExprEnergy::new(&expr, &model, g).unwrap(), &z, &label);
    }
}

/// Adaptive NOT treats `alpha` as a constant, so its gradient is the
/// gradient of the expression with `alpha` frozen at the current point.
/// Components whose stencil straddles a leaky-ReLU kink (one-sided
/// differences disagree) are not comparable and are counted instead.
#[test]
fn nested_compositions_and_adaptive_not_are_exact() {
    let mut rng = Stream::new(77);
    let world = World::benchmark(&WorldConfig::bench8()).unwrap();
    let model =
        ClassifierModel::init(&world.spec, ClassifierMode::Separate, InputSpace::Data, 8, 5).unwrap();
    let g = &world.generator;
    let spec = &world.spec;
    let adaptive = "AND(attr0=1, OR(attr1=2, attr2=0.7; beta=ln20), NOT(attr0=1, attr1=0; alpha=adaptive))";
    let expr = EnergyExpr::parse(adaptive, spec).unwrap();
    let energy = ExprEnergy::new(&expr, &model, g).unwrap();
    let negative = EnergyExpr::parse("attr1=0", spec).unwrap();
    let negative = ExprEnergy::new(&negative, &model, g).unwrap();
    let h = 1e-5;
    let mut kinks = 0;
    for _ in 0..20 {
        let z = rng.normal_vec(8);
        let alpha = AlphaPolicy::Adaptive.alpha(negative.cond_value(&z).unwrap());
        let frozen = EnergyExpr::parse(
            &adaptive.replace("alpha=adaptive", &format!("alpha={alpha:e}")),
            spec,
        )
        .unwrap();
        let frozen = ExprEnergy::new(&frozen, &model, g).unwrap();
        assert_eq!(energy.value(&z).unwrap(), frozen.value(&z).unwrap());
        let (e0, grad) = energy.value_grad(&z).unwrap();
        for k in 0..8 {
            let shifted = |d: f64| {
                let mut p = z.clone();
                p[k] += d;
                frozen.value(&p).unwrap()
            };
            let (up, down) = (shifted(h), shifted(-h));
            let (fwd, bwd) = ((up - e0) / h, (e0 - down) / h);
            if (fwd - bwd).abs() > 1e-3 * grad[k].abs().max(1.0) {
                kinks += 1;
                continue;
            }
            let fd = (up - down) / (2.0 * h);
            assert!(relative_error(grad[k], fd) < 1e-5, "{} vs {fd}", grad[k]);
        }
    }
    assert!(kinks <= 4, "{kinks} of 160 stencils straddle a kink");
}
