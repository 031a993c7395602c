use lace_web::{DemoState, RESOLUTION};

fn demo() -> DemoState {
    DemoState::new(3000, 20, 0).unwrap()
}

#[test]
fn density_is_a_normalised_map() {
    let d = demo();
    let cells = d.density("attr0=1").unwrap();
    assert_eq!(cells.len(), RESOLUTION * RESOLUTION);
    assert!(cells.iter().all(|&p| p >= 0.0));
    let total: f64 = cells.iter().sum();
    assert!(total > 0.99 && total <= 1.0 + 1e-12, "{total}");
    assert!(d.density("attr9=1").is_err());
}

#[test]
fn every_sampler_runs_and_reports() {
    let d = demo();
    for sampler in ["ld", "ode", "euler", "pc"] {
        let v = d.sample("attr0=1", sampler, 200, 4).unwrap();
        assert_eq!(v.latent.len(), 400);
        assert!((0.0..=1.0).contains(&v.satisfaction));
        assert!((0.0..=1.0).contains(&v.tv));
        assert!(v.mean_nfe >= 0.0);
    }
    let ode = d.sample("attr0=1", "ode", 500, 4).unwrap();
    assert!(ode.satisfaction > 0.9, "{}", ode.satisfaction);
    assert!(d.sample("attr0=1", "heun", 10, 0).is_err());
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let d = demo();
    let a = d.sample("OR(attr0=1, attr1=2)", "ld", 50, 9).unwrap();
    let b = d.sample("OR(attr0=1, attr1=2)", "ld", 50, 9).unwrap();
    assert_eq!(a.latent, b.latent);
}

#[test]
fn edits_return_every_stage() {
    let d = demo();
    let stages = d.edit("attr0=1, attr1=2", 30, 1).unwrap();
    assert_eq!(stages.len(), 3);
    assert!(stages.iter().all(|s| s.len() == 60));
    assert_ne!(stages[0], stages[1]);
    assert!(d.edit("OR(attr0=1, attr1=2)", 3, 1).is_err());
}
