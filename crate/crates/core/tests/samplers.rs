mod common;

use lace_core::energy::{EditState, EditWeights, EnergyExpr, ExprEnergy, LatentEnergy, SeqEditEnergy};
use lace_core::eval::{acc_score, id_drift};
use lace_core::ndmath::RealArray;
use lace_core::oracle::{grid_conditional_density, histogram, tv_distance, GridSpec};
use lace_core::samplers::{
    sample, sample_per_chain, LdConfig, OdeConfig, PcConfig, SamplerConfig, SamplerKind, EulerConfig,
};
use lace_core::worldgen::{AttrValue, AttributeCode, WorldConfig};

fn moments(z: &RealArray) -> Vec<(f64, f64)> {
    let n = z.rows() as f64;
    (0..z.cols())
        .map(|k| {
            let mean = z.row_iter().map(|r| r[k]).sum::<f64>() / n;
            let var = z.row_iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n;
            (mean, var)
        })
        .collect()
}

#[test]
fn prior_only_samplers_preserve_the_prior() {
    let (world, model) = common::trained_plane();
    let expr = EnergyExpr::empty();
    let energy = ExprEnergy::new(&expr, &model, &world.generator).unwrap();

    let ld = LdConfig {
        steps: 5000,
        step_size: 0.01,
        matched_noise: true,
        ..LdConfig::default()
    };
    let batch = sample(&energy, &SamplerConfig::new(SamplerKind::Ld(ld), 20_000, 4), None).unwrap();
    for (mean, var) in moments(&batch.latent) {
        assert!(mean.abs() < 0.05 && (0.9..=1.1).contains(&var), "LD mean {mean} var {var}");
    }

    let pc = PcConfig {
        steps: 200,
        corrector_steps: 1,
        snr: 0.05,
    };
    let batch = sample(&energy, &SamplerConfig::new(SamplerKind::Pc(pc), 20_000, 5), None).unwrap();
    for (mean, var) in moments(&batch.latent) {
        assert!(mean.abs() < 0.05 && (0.85..=1.15).contains(&var), "PC mean {mean} var {var}");
    }

    let init = RealArray::new(vec![50, 2], lace_core::rng::Stream::new(6).normal_vec(100)).unwrap();
    let cfg = SamplerConfig::new(SamplerKind::Ode(OdeConfig::default()), 50, 0);
    let batch = sample(&energy, &cfg, Some(&init)).unwrap();
    assert_eq!(batch.latent, init);
}

#[test]
fn default_langevin_satisfies_a_half_plane_attribute() {
    let (world, model) = common::trained_half_plane();
    let expr = EnergyExpr::parse("attr0=1", &world.spec).unwrap();
    let energy = ExprEnergy::new(&expr, &model, &world.generator).unwrap();
    let cfg = SamplerConfig::new(SamplerKind::Ld(LdConfig::default()), 5000, 1);
    let batch = sample(&energy, &cfg, None).unwrap();
    let code = AttributeCode::new(&world.spec, vec![Some(AttrValue::Category(1))]).unwrap();
    let acc = acc_score(&batch.latent, &[code], &world.truth, &world.generator).unwrap();
    assert!(acc.aggregate >= 0.9, "ACC {}", acc.aggregate);
}

#[test]
fn finer_euler_steps_do_not_move_away_from_the_oracle() {
    let (world, model) = common::trained_plane();
    let expr = EnergyExpr::parse("attr0=1", &world.spec).unwrap();
    let energy = ExprEnergy::new(&expr, &model, &world.generator).unwrap();
    let grid = GridSpec::default();
    let oracle = grid_conditional_density(&energy, grid).unwrap();
    let tv = |step: f64| {
        let cfg = SamplerConfig::new(SamplerKind::Euler(EulerConfig { step_size: step }), 5000, 2);
        let batch = sample(&energy, &cfg, None).unwrap();
        assert_eq!(batch.mean_nfe(), (1.0 / step).round());
        tv_distance(&oracle, &histogram(&batch.latent, grid).unwrap()).unwrap()
    };
    let (coarse, fine) = (tv(1e-2), tv(1e-3));
    assert!(fine <= coarse, "TV at 1e-3 {fine} vs 1e-2 {coarse}");
}

#[test]
fn runs_are_deterministic_and_per_chain_energies_agree_with_shared() {
    let (world, model) = common::trained_plane();
    let expr = EnergyExpr::parse("attr0=1, attr1=2", &world.spec).unwrap();
    let energy = ExprEnergy::new(&expr, &model, &world.generator).unwrap();
    for kind in [
        SamplerKind::Ld(LdConfig::default()),
        SamplerKind::Ode(OdeConfig::default()),
        SamplerKind::Pc(PcConfig::default()),
    ] {
        let cfg = SamplerConfig::new(kind, 64, 9);
        let a = sample(&energy, &cfg, None).unwrap();
        let b = sample(&energy, &cfg, None).unwrap();
        assert_eq!(a, b);
        let each: Vec<&dyn LatentEnergy> = vec![&energy; 64];
        let c = sample_per_chain(&each, &cfg, None).unwrap();
        assert_eq!(a.latent, c.latent);
        assert_eq!(a.diagnostics, c.diagnostics);
    }
}

#[test]
fn proximity_weight_reduces_edit_drift() {
    let (world, model) = common::trained(&WorldConfig::bench8());
    let g = &world.generator;
    let start = sample(
        &ExprEnergy::new(&EnergyExpr::empty(), &model, g).unwrap(),
        &SamplerConfig::new(SamplerKind::Ld(LdConfig { steps: 0, ..LdConfig::default() }), 1000, 3),
        None,
    )
    .unwrap()
    .latent;
    let drift = |mu: f64| {
        let states: Vec<EditState> = start
            .row_iter()
            .map(|z| EditState {
                z_prev: z.to_vec(),
                edits: vec![(0, AttrValue::Category(1))],
                weights: EditWeights {
                    mu,
                    ..EditWeights::default()
                },
                sigma_sq: 0.01,
            })
            .collect();
        let energies: Vec<SeqEditEnergy> =
            states.iter().map(|s| SeqEditEnergy::new(s, &model, g).unwrap()).collect();
        let refs: Vec<&dyn LatentEnergy> = energies.iter().map(|e| e as &dyn LatentEnergy).collect();
        let cfg = SamplerConfig::new(SamplerKind::Ode(OdeConfig::default()), 1000, 4);
        let out = sample_per_chain(&refs, &cfg, Some(&start)).unwrap();
        id_drift(&start, &out.latent, g).unwrap()
    };
    let (with, without) = (drift(0.04), drift(0.0));
    assert!(with < without, "drift {with} (mu=0.04) vs {without} (mu=0)");
}
