#![allow(dead_code)]

use lace_core::classifier::{train_classifier, ClassifierMode, ClassifierModel, InputSpace, TrainConfig};
use lace_core::ndmath::MlpParams;
use lace_core::worldgen::{synthesize_pairs, World, WorldConfig};

/// Plane world with a classifier trained on 10k pairs.
pub fn trained_plane() -> (World, ClassifierModel) {
    trained(&WorldConfig::plane())
}

pub fn trained(cfg: &WorldConfig) -> (World, ClassifierModel) {
    let world = World::benchmark(cfg).unwrap();
    let data = synthesize_pairs(&world.generator, &world.truth, 10_000, 0).unwrap();
    let train = TrainConfig {
        seed: 1,
        ..TrainConfig::default()
    };
    let (model, _) = train_classifier(&data, &world.generator, &world.spec, &train).unwrap();
    (world, model)
}

/// Half-plane world with a trained classifier.
pub fn trained_half_plane() -> (World, ClassifierModel) {
    let world = World::half_plane(2).unwrap();
    let data = synthesize_pairs(&world.generator, &world.truth, 10_000, 0).unwrap();
    let (model, _) =
        train_classifier(&data, &world.generator, &world.spec, &TrainConfig::default()).unwrap();
    (world, model)
}

/// Classifier whose every head outputs zeros.
pub fn zero_model(world: &World) -> ClassifierModel {
    let mut m = ClassifierModel::init(
        &world.spec,
        ClassifierMode::Separate,
        InputSpace::Latent,
        world.latent_dim(),
        0,
    )
    .unwrap();
    for net in m.networks_mut() {
        *net = MlpParams::zeros(&net.layer_dims).unwrap();
    }
    m
}
