mod common;

use lace_core::classifier::{
    checkpoint_from_str, checkpoint_to_string, label_accuracy, predict_heads, train_classifier,
    TrainConfig,
};
use lace_core::ndmath::{condition_number, RealArray};
use lace_core::rng::Stream;
use lace_core::worldgen::{
    make_generator, synthesize_pairs, Generator, GeneratorKind, World, WorldConfig, MAX_LINEAR_CONDITION,
};
use nalgebra::DMatrix;

fn svd_condition(m: &RealArray) -> f64 {
    let a = DMatrix::from_row_slice(m.shape()[0], m.shape()[1], m.data());
    let s = a.singular_values();
    s.max() / s.min()
}

#[test]
fn linear_generators_are_well_conditioned() {
    for (latent, data, seed) in [(2, 2, 11), (8, 8, 11), (3, 5, 4), (6, 6, 99)] {
        let Generator::Linear { matrix, .. } = make_generator(GeneratorKind::Linear, latent, data, seed).unwrap()
        else {
            unreachable!()
        };
        let oracle = svd_condition(&matrix);
        assert!(oracle < MAX_LINEAR_CONDITION);
        assert!((condition_number(&matrix).unwrap() - oracle).abs() < 1e-8 * oracle);
    }
}

#[test]
fn benchmark_training_reaches_high_accuracy_and_reports_consistently() {
    let world = World::benchmark(&WorldConfig::bench8()).unwrap();
    let data = synthesize_pairs(&world.generator, &world.truth, 10_000, 0).unwrap();
    let (model, report) =
        train_classifier(&data, &world.generator, &world.spec, &TrainConfig::default()).unwrap();
    let features = model.input_space.batch_features(&world.generator, &data).unwrap();
    let again = label_accuracy(&model, &features, &data.labels).unwrap();
    assert_eq!(again, report.train_accuracy);
    assert!(report.aggregate_accuracy() >= 0.99, "{:?}", report.train_accuracy);
    let losses = &report.epoch_losses;
    assert!(losses.last().unwrap() < &losses[0]);

    let restored = checkpoint_from_str(&checkpoint_to_string(&model).unwrap()).unwrap();
    let x = RealArray::new(vec![1000, 8], Stream::new(17).normal_vec(8000)).unwrap();
    assert_eq!(predict_heads(&model, &x).unwrap(), predict_heads(&restored, &x).unwrap());
}
