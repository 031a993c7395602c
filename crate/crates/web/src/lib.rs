//! Browser demo over the 2-D plane world: exact conditional densities,
//! sampler runs compared against them, and sequential edits.
//!
//! [`DemoState`] is plain Rust and tested natively; [`Demo`] is the thin
//! `wasm-bindgen` wrapper the page talks to.

use lace_core::classifier::{train_classifier, ClassifierModel, TrainConfig};
use lace_core::energy::{EditState, EditWeights, EnergyExpr, ExprEnergy, LatentEnergy, Node, SeqEditEnergy};
use lace_core::eval::satisfaction;
use lace_core::ndmath::RealArray;
use lace_core::oracle::{grid_conditional_density, histogram, tv_distance, GridSpec};
use lace_core::samplers::{sample, sample_per_chain, EulerConfig, LdConfig, OdeConfig, PcConfig, SamplerConfig, SamplerKind};
use lace_core::worldgen::{synthesize_pairs, World, WorldConfig};
use lace_core::{Error, Result};
use wasm_bindgen::prelude::*;

/// Grid resolution of the density map shown on the page.
pub const RESOLUTION: usize = 64;

/// Outcome of one sampler run.
#[derive(Clone, Debug)]
pub struct SampleView {
    /// Row-major `chains x 2` latents.
    pub latent: Vec<f64>,
    /// Fraction of samples the truth oracle judges to satisfy the expression.
    pub satisfaction: f64,
    pub mean_nfe: f64,
    /// Total variation between the sample histogram and the exact density.
    pub tv: f64,
}

pub struct DemoState {
    world: World,
    model: ClassifierModel,
    grid: GridSpec,
}

impl DemoState {
    /// Builds the plane world and trains its classifier on `pairs` samples.
    pub fn new(pairs: usize, epochs: usize, seed: u64) -> Result<Self> {
        let world = World::benchmark(&WorldConfig::plane())?;
        let data = synthesize_pairs(&world.generator, &world.truth, pairs, seed)?;
        let train = TrainConfig {
            epochs,
            milestones: vec![epochs * 6 / 10, epochs * 9 / 10],
            seed: seed + 1,
            ..TrainConfig::default()
        };
        let (model, _) = train_classifier(&data, &world.generator, &world.spec, &train)?;
        Ok(Self {
            world,
            model,
            grid: GridSpec::with_resolution(RESOLUTION),
        })
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    fn expr(&self, text: &str) -> Result<EnergyExpr> {
        EnergyExpr::parse(text, &self.world.spec)
    }

    /// Normalised cell probabilities of the conditional density, row-major
    /// with the first latent coordinate as the row.
    pub fn density(&self, text: &str) -> Result<Vec<f64>> {
        let expr = self.expr(text)?;
        let energy = ExprEnergy::new(&expr, &self.model, &self.world.generator)?;
        Ok(grid_conditional_density(&energy, self.grid)?.cells)
    }

    /// Samples `text` with the named sampler (`ld`, `ode`, `euler`, `pc`).
    pub fn sample(&self, text: &str, sampler: &str, chains: usize, seed: u64) -> Result<SampleView> {
        let kind = match sampler {
            "ld" => SamplerKind::Ld(LdConfig::default()),
            "ode" => SamplerKind::Ode(OdeConfig::default()),
            "euler" => SamplerKind::Euler(EulerConfig { step_size: 1e-3 }),
            "pc" => SamplerKind::Pc(PcConfig::default()),
            other => return Err(Error::Argument(format!("unknown sampler {other:?}"))),
        };
        let expr = self.expr(text)?;
        let g = &self.world.generator;
        let energy = ExprEnergy::new(&expr, &self.model, g)?;
        let batch = sample(&energy, &SamplerConfig::new(kind, chains, seed), None)?;
        let exact = grid_conditional_density(&energy, self.grid)?;
        Ok(SampleView {
            tv: tv_distance(&exact, &histogram(&batch.latent, self.grid)?)?,
            satisfaction: satisfaction(&batch.latent, &expr, &self.world.truth, g)?,
            mean_nfe: batch.mean_nfe(),
            latent: batch.latent.data().to_vec(),
        })
    }

    /// Applies the comma-separated `edits` to `chains` prior draws with the
    /// default edit weights. Returns the start and every stage, each
    /// row-major `chains x 2`.
    pub fn edit(&self, edits: &str, chains: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let expr = self.expr(edits)?;
        let leaves: Vec<_> = match &expr.root {
            Node::Leaf(_) | Node::And(_) => expr.leaves().iter().map(|l| (l.attr, l.target)).collect(),
            _ => return Err(Error::Argument("edits must be a comma-separated list of NAME=VALUE".into())),
        };
        if leaves.is_empty() {
            return Err(Error::Argument("no edits given".into()));
        }
        let g = &self.world.generator;
        let cfg = SamplerConfig::new(SamplerKind::Ode(OdeConfig::default()), chains, seed);
        let start = RealArray::new(
            vec![chains, 2],
            (0..chains as u64)
                .flat_map(|c| lace_core::rng::Stream::for_item(seed, c).normal_vec(2))
                .collect(),
        )?;
        let mut stages = vec![start.data().to_vec()];
        let mut prev = start;
        for i in 0..leaves.len() {
            let states: Vec<EditState> = prev
                .row_iter()
                .map(|z| EditState {
                    z_prev: z.to_vec(),
                    edits: leaves[..=i].to_vec(),
                    weights: EditWeights::default(),
                    sigma_sq: expr.sigma_sq,
                })
                .collect();
            let energies = states
                .iter()
                .map(|s| SeqEditEnergy::new(s, &self.model, g))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&dyn LatentEnergy> = energies.iter().map(|e| e as &dyn LatentEnergy).collect();
            prev = sample_per_chain(&refs, &cfg, Some(&prev))?.latent;
            stages.push(prev.data().to_vec());
        }
        Ok(stages)
    }
}

type JsResult<T> = std::result::Result<T, JsError>;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Handle held by the page.
#[wasm_bindgen]
pub struct Demo {
    state: DemoState,
    last: Option<SampleView>,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(pairs: usize, epochs: usize) -> JsResult<Demo> {
        Ok(Demo {
            state: DemoState::new(pairs, epochs, 0).map_err(js)?,
            last: None,
        })
    }

    pub fn resolution(&self) -> usize {
        RESOLUTION
    }

    pub fn lo(&self) -> f64 {
        self.state.grid.lo
    }

    pub fn hi(&self) -> f64 {
        self.state.grid.hi
    }

    pub fn density(&self, expr: &str) -> JsResult<Vec<f64>> {
        self.state.density(expr).map_err(js)
    }

    /// Runs a sampler and returns the latents; statistics are read back
    /// with the getters below.
    pub fn sample(&mut self, expr: &str, sampler: &str, chains: usize, seed: u32) -> JsResult<Vec<f64>> {
        let view = self.state.sample(expr, sampler, chains, seed.into()).map_err(js)?;
        let latent = view.latent.clone();
        self.last = Some(view);
        Ok(latent)
    }

    pub fn last_tv(&self) -> f64 {
        self.last.as_ref().map_or(f64::NAN, |v| v.tv)
    }

    pub fn last_satisfaction(&self) -> f64 {
        self.last.as_ref().map_or(f64::NAN, |v| v.satisfaction)
    }

    pub fn last_mean_nfe(&self) -> f64 {
        self.last.as_ref().map_or(f64::NAN, |v| v.mean_nfe)
    }

    /// Start and stage latents concatenated: `(stages + 1) x chains x 2`.
    pub fn edit(&self, edits: &str, chains: usize, seed: u32) -> JsResult<Vec<f64>> {
        Ok(self.state.edit(edits, chains, seed.into()).map_err(js)?.concat())
    }
}
