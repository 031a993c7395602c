mod common;

use lace_core::classifier::{ClassifierMode, ClassifierModel, InputSpace};
use lace_core::energy::{EnergyExpr, ExprEnergy};
use lace_core::ndmath::{MlpParams, RealArray};
use lace_core::oracle::{
    acceptance_rate, grid_conditional_density, histogram, rejection_sample, tv_distance, GridDensity,
    GridSpec,
};
use lace_core::rng::Stream;
use lace_core::worldgen::{make_generator, Attribute, AttributeSpec, GeneratorKind, World, WorldConfig};
use lace_core::Error;

fn uniform_binary_pair() -> (AttributeSpec, ClassifierModel) {
    let spec = AttributeSpec::new(vec![Attribute::discrete("a", 2), Attribute::discrete("b", 2)]).unwrap();
    let mut m = ClassifierModel::init(&spec, ClassifierMode::Separate, InputSpace::Latent, 2, 0).unwrap();
    for net in m.networks_mut() {
        *net = MlpParams::zeros(&net.layer_dims).unwrap();
    }
    (spec, m)
}

#[test]
fn rejection_acceptance_follows_the_structural_bound() {
    let (spec, model) = uniform_binary_pair();
    let g = make_generator(GeneratorKind::Identity, 2, 2, 0).unwrap();
    let rate = |text: &str| {
        let e = EnergyExpr::parse(text, &spec).unwrap();
        let energy = ExprEnergy::new(&e, &model, &g).unwrap();
        acceptance_rate(&e, &energy, 100_000, 5).unwrap()
    };
    assert!((rate("a=1") - 0.5).abs() < 0.01);
    assert!((rate("a=1, b=0") - 0.25).abs() < 0.01);
}

#[test]
fn rejection_refuses_negation() {
    let (spec, model) = uniform_binary_pair();
    let g = make_generator(GeneratorKind::Identity, 2, 2, 0).unwrap();
    let e = EnergyExpr::parse("NOT(a=1, b=1)", &spec).unwrap();
    let energy = ExprEnergy::new(&e, &model, &g).unwrap();
    match rejection_sample(&e, &energy, 10, 0) {
        Err(Error::Capability(msg)) => assert!(msg.contains("grid"), "{msg}"),
        other => panic!("expected a capability error, got {other:?}"),
    }
}

#[test]
fn empty_code_grid_is_a_discretised_standard_gaussian() {
    let world = World::benchmark(&WorldConfig::plane()).unwrap();
    let model = common::zero_model(&world);
    let e = EnergyExpr::empty();
    let energy = ExprEnergy::new(&e, &model, &world.generator).unwrap();
    let grid = GridSpec::default();
    let p = grid_conditional_density(&energy, grid).unwrap();
    let (i, j) = p.argmax();
    assert!(grid.center(i).abs() <= grid.cell_width() && grid.center(j).abs() <= grid.cell_width());
    assert!((p.total() - 1.0).abs() < 1e-12);
    // Uniform logits keep the density symmetric under z -> -z.
    let leaf = EnergyExpr::parse("attr0=1, attr1=2", &world.spec).unwrap();
    let energy = ExprEnergy::new(&leaf, &model, &world.generator).unwrap();
    let q = grid_conditional_density(&energy, grid).unwrap();
    let r = grid.resolution;
    for a in 0..r {
        for b in 0..r {
            assert!((q.cell(a, b) - q.cell(r - 1 - a, r - 1 - b)).abs() < 1e-15);
        }
    }
}

#[test]
fn half_plane_mass_and_grid_refinement() {
    let (world, model) = common::trained_half_plane();
    let e = EnergyExpr::parse("attr0=1", &world.spec).unwrap();
    let energy = ExprEnergy::new(&e, &model, &world.generator).unwrap();
    let coarse = grid_conditional_density(&energy, GridSpec::default()).unwrap();
    let mass = coarse.mass_where(|z1, _| z1 > 0.0);
    assert!(mass >= 0.95, "half-plane mass {mass}");
    // Pool the 256^2 grid onto 128^2 and compare.
    let fine = grid_conditional_density(&energy, GridSpec::with_resolution(256)).unwrap();
    let mut pooled = vec![0.0; 128 * 128];
    for a in 0..256 {
        for b in 0..256 {
            pooled[(a / 2) * 128 + b / 2] += fine.cell(a, b);
        }
    }
    let pooled = GridDensity {
        grid: GridSpec::default(),
        cells: pooled,
        outside: 0.0,
    };
    let tv = tv_distance(&coarse, &pooled).unwrap();
    assert!(tv < 0.005, "refinement TV {tv}");
}

#[test]
fn monte_carlo_histogram_of_a_million_gaussian_draws() {
    let grid = GridSpec::default();
    let r = grid.resolution;
    let w = grid.cell_width();
    let phi = |a: f64, b: f64| (-(a * a + b * b) / 2.0).exp();
    let mut cells: Vec<f64> = (0..r * r)
        .map(|k| phi(grid.center(k / r), grid.center(k % r)) * w * w / (2.0 * std::f64::consts::PI))
        .collect();
    let inside: f64 = cells.iter().sum();
    cells.iter_mut().for_each(|c| *c /= inside);
    let exact = GridDensity {
        grid,
        cells,
        outside: 0.0,
    };
    let mut rng = Stream::new(1);
    let draws = RealArray::new(vec![1_000_000, 2], rng.normal_vec(2_000_000)).unwrap();
    let tv = tv_distance(&exact, &histogram(&draws, grid).unwrap()).unwrap();
    assert!(tv <= 0.02, "TV {tv}");
}

#[test]
fn rejection_samples_match_the_grid_oracle() {
    let (world, model) = common::trained_plane();
    let e = EnergyExpr::parse("attr0=1", &world.spec).unwrap();
    let energy = ExprEnergy::new(&e, &model, &world.generator).unwrap();
    let grid = GridSpec::default();
    let oracle = grid_conditional_density(&energy, grid).unwrap();
    let draws = rejection_sample(&e, &energy, 50_000, 3).unwrap();
    let tv = tv_distance(&oracle, &histogram(&draws.samples, grid).unwrap()).unwrap();
    assert!(tv <= 0.03, "rejection vs grid TV {tv}");
}

/// For `n` draws the expected binning error is close to
/// `½ √(2/(πn)) Σ_k √p_k`, the floor any sampler's histogram TV sits on.
#[test]
fn histogram_error_matches_the_binning_floor() {
    let grid = GridSpec::default();
    let r = grid.resolution;
    let w = grid.cell_width();
    let mut cells: Vec<f64> = (0..r * r)
        .map(|k| {
            let (a, b) = (grid.center(k / r), grid.center(k % r));
            (-(a * a + b * b) / 2.0).exp() * w * w / (2.0 * std::f64::consts::PI)
        })
        .collect();
    let inside: f64 = cells.iter().sum();
    cells.iter_mut().for_each(|c| *c /= inside);
    let root_sum: f64 = cells.iter().map(|p| p.sqrt()).sum();
    let exact = GridDensity {
        grid,
        cells,
        outside: 0.0,
    };
    for (n, seed) in [(200_000usize, 2u64), (1_000_000, 1)] {
        let predicted = 0.5 * (2.0 / (std::f64::consts::PI * n as f64)).sqrt() * root_sum;
        let draws = RealArray::new(vec![n, 2], Stream::new(seed).normal_vec(2 * n)).unwrap();
        let tv = tv_distance(&exact, &histogram(&draws, grid).unwrap()).unwrap();
        assert!((tv / predicted - 1.0).abs() < 0.1, "n={n}: TV {tv} vs floor {predicted}");
    }
}
