//! Experiment protocols shared by the commands and the acceptance suite.
//! Every command and every sweep row goes through these functions, so a
//! sweep row is byte-for-byte a standalone `sample` run of its config.

use lace_core::classifier::{load_checkpoint, train_classifier, ClassifierModel, TrainReport};
use lace_core::energy::{EditState, EnergyExpr, ExprEnergy, LatentEnergy, Node, SeqEditEnergy};
use lace_core::eval::{acc_score, agreement, des_score, id_drift, satisfaction, AccReport, EvalReport};
use lace_core::ndmath::RealArray;
use lace_core::oracle::{
    grid_conditional_density, histogram, rejection_sample, tv_distance, GridDensity, GridSpec,
    RejectionOutcome,
};
use lace_core::rng::Stream;
use lace_core::samplers::{sample, sample_per_chain, ChainDiagnostics, SampleBatch};
use lace_core::worldgen::{synthesize_pairs, AttrValue, AttributeCode, AttributeSpec, World};

use crate::config::{OracleKind, RunConfig, SamplerName, SeedPurpose, SweepGrid, TargetMode};
use crate::error::{CliError, Result};

/// The code of an expression that is a plain conjunction of leaves with
/// at most one target per attribute, or `None`.
pub fn conjunctive_code(expr: &EnergyExpr, spec: &AttributeSpec) -> Option<AttributeCode> {
    fn walk(node: &Node, code: &mut AttributeCode) -> bool {
        match node {
            Node::Leaf(l) => match code.get(l.attr) {
                Some(v) if v != l.target => false,
                _ => {
                    code.set(l.attr, Some(l.target));
                    true
                }
            },
            Node::And(children) => children.iter().all(|c| walk(c, code)),
            _ => false,
        }
    }
    let mut code = AttributeCode::empty(spec.len());
    (walk(&expr.root, &mut code) && code.present().next().is_some()).then_some(code)
}

/// Parses `text` as a list of leaves, keeping their order.
pub fn parse_leaf_list(text: &str, spec: &AttributeSpec) -> Result<Vec<(usize, AttrValue)>> {
    let expr = EnergyExpr::parse(text, spec)?;
    let only_leaves = match &expr.root {
        Node::Leaf(_) => true,
        Node::And(c) => c.iter().all(|n| matches!(n, Node::Leaf(_))),
        _ => false,
    };
    if !only_leaves {
        return Err(CliError::config(format!("'{text}' must be a comma-separated list of NAME=VALUE")));
    }
    let leaves: Vec<(usize, AttrValue)> = expr.leaves().iter().map(|l| (l.attr, l.target)).collect();
    if leaves.is_empty() {
        return Err(CliError::config(format!("'{text}' names no attribute")));
    }
    Ok(leaves)
}

fn parse_expr(cfg: &RunConfig, spec: &AttributeSpec) -> Result<EnergyExpr> {
    let mut expr = EnergyExpr::parse(&cfg.experiment.expr, spec)?;
    expr.sigma_sq = cfg.experiment.sigma_sq;
    Ok(expr)
}

pub struct Trained {
    pub world: World,
    pub model: ClassifierModel,
    pub report: TrainReport,
    pub train_size: usize,
}

/// Synthesises the training set (minus any holdout, plus label noise) and
/// trains the classifier.
pub fn train(cfg: &RunConfig) -> Result<Trained> {
    let world = cfg.world.build()?;
    let mut data = synthesize_pairs(
        &world.generator,
        &world.truth,
        cfg.classifier.dataset_size,
        cfg.derived_seed(SeedPurpose::Data),
    )?;
    if let Some(text) = &cfg.classifier.holdout {
        let mut code = AttributeCode::empty(world.spec.len());
        for (a, v) in parse_leaf_list(text, &world.spec)? {
            code.set(a, Some(v));
        }
        data = data.without(&world.spec, &code)?;
    }
    if cfg.classifier.label_noise > 0.0 {
        data = data.with_label_noise(
            &world.spec,
            cfg.classifier.label_noise,
            cfg.derived_seed(SeedPurpose::LabelNoise),
        )?;
    }
    let train_cfg = cfg.classifier.train_config(cfg.derived_seed(SeedPurpose::Train));
    let (model, report) = train_classifier(&data, &world.generator, &world.spec, &train_cfg)?;
    Ok(Trained {
        world,
        model,
        report,
        train_size: data.len(),
    })
}

/// Loads the configured checkpoint and checks it against the world.
pub fn load(cfg: &RunConfig) -> Result<(World, ClassifierModel)> {
    let world = cfg.world.build()?;
    let path = cfg.checkpoint_path();
    if !path.exists() {
        return Err(CliError::config(format!(
            "checkpoint {} does not exist; run `lace train` first or set classifier.checkpoint",
            path.display()
        )));
    }
    let model = load_checkpoint(&path)?;
    if model.spec != world.spec {
        return Err(CliError::config("checkpoint attributes do not match the configured world"));
    }
    if model.input_dim() != model.input_space.dim(&world.generator)? {
        return Err(CliError::config("checkpoint input width does not match the configured world"));
    }
    Ok((world, model))
}

pub struct SampleOutcome {
    pub batch: SampleBatch,
    /// One code for every chain, or one per chain.
    pub targets: Vec<AttributeCode>,
    /// Conditional accuracy, when the targets form a code.
    pub acc: Option<AccReport>,
    /// Mean truth degree of the conditioning expression.
    pub satisfaction: f64,
    pub tv: Option<f64>,
    pub acceptance_rate: Option<f64>,
}

impl SampleOutcome {
    /// ACC when defined, otherwise the satisfaction rate.
    pub fn score(&self) -> f64 {
        self.acc.as_ref().map_or(self.satisfaction, |a| a.aggregate)
    }
}

/// Samples according to `cfg`; with `with_tv` (or `experiment.oracle =
/// grid`) the histogram is also compared to the grid oracle.
pub fn sample_run(cfg: &RunConfig, world: &World, model: &ClassifierModel, with_tv: bool) -> Result<SampleOutcome> {
    let g = &world.generator;
    let scfg = cfg.sampler.sampler_config(cfg.derived_seed(SeedPurpose::Sample))?;
    match cfg.experiment.targets {
        TargetMode::Uniform => {
            if cfg.experiment.oracle.is_some() {
                return Err(CliError::config("oracles need a single expression, not uniform targets"));
            }
            let seed = cfg.derived_seed(SeedPurpose::Targets);
            let codes: Vec<AttributeCode> = (0..scfg.chains)
                .map(|c| world.spec.uniform_code(&mut Stream::for_item(seed, c as u64)))
                .collect();
            let exprs: Vec<EnergyExpr> = codes
                .iter()
                .map(|c| EnergyExpr {
                    sigma_sq: cfg.experiment.sigma_sq,
                    ..EnergyExpr::from_code(c)
                })
                .collect();
            let energies = exprs
                .iter()
                .map(|e| ExprEnergy::new(e, model, g))
                .collect::<lace_core::Result<Vec<_>>>()?;
            let refs: Vec<&dyn LatentEnergy> = energies.iter().map(|e| e as &dyn LatentEnergy).collect();
            let mut batch = sample_per_chain(&refs, &scfg, None)?;
            batch.expr = Some("uniform".into());
            let acc = acc_score(&batch.latent, &codes, &world.truth, g)?;
            Ok(SampleOutcome {
                satisfaction: acc.aggregate,
                acc: Some(acc),
                batch,
                targets: codes,
                tv: None,
                acceptance_rate: None,
            })
        }
        TargetMode::Expr => {
            let expr = parse_expr(cfg, &world.spec)?;
            let energy = ExprEnergy::new(&expr, model, g)?;
            let mut acceptance_rate = None;
            let mut batch = if cfg.experiment.oracle == Some(OracleKind::Rejection) {
                let draws = rejection_sample(&expr, &energy, scfg.chains, cfg.derived_seed(SeedPurpose::Oracle))?;
                acceptance_rate = Some(draws.acceptance_rate);
                let diagnostics = draws
                    .samples
                    .row_iter()
                    .map(|z| {
                        Ok(ChainDiagnostics {
                            final_energy: energy.value(z)?,
                            nfe: 0,
                            accepted_steps: 0,
                            rejected_steps: 0,
                        })
                    })
                    .collect::<lace_core::Result<Vec<_>>>()?;
                SampleBatch {
                    latent: draws.samples,
                    diagnostics,
                    config: scfg,
                    expr: None,
                }
            } else {
                sample(&energy, &scfg, None)?
            };
            batch.expr = Some(expr.display(&world.spec).to_string());
            let code = conjunctive_code(&expr, &world.spec);
            let acc = code
                .as_ref()
                .map(|c| acc_score(&batch.latent, std::slice::from_ref(c), &world.truth, g))
                .transpose()?;
            let tv = if with_tv || cfg.experiment.oracle == Some(OracleKind::Grid) {
                let grid = GridSpec::with_resolution(cfg.experiment.grid_resolution);
                let oracle = grid_conditional_density(&energy, grid)?;
                Some(tv_distance(&oracle, &histogram(&batch.latent, grid)?)?)
            } else {
                None
            };
            Ok(SampleOutcome {
                satisfaction: satisfaction(&batch.latent, &expr, &world.truth, g)?,
                acc,
                batch,
                targets: vec![code.unwrap_or_else(|| AttributeCode::empty(world.spec.len()))],
                tv,
                acceptance_rate,
            })
        }
    }
}

pub struct EditStage {
    pub attr: usize,
    pub target: AttrValue,
    pub batch: SampleBatch,
    /// Accumulated code after this stage (later edits win).
    pub code: AttributeCode,
    pub acc_before: Vec<f64>,
    pub acc_after: Vec<f64>,
    pub des: f64,
    pub id_drift: f64,
    /// ACC of the stage output against the accumulated code.
    pub acc: AccReport,
}

pub struct EditOutcome {
    pub start: RealArray,
    pub stages: Vec<EditStage>,
    pub report: EvalReport,
}

/// Applies the configured edits in order. Stage `i` samples the edit energy
/// warm-started from the output of stage `i - 1`; stage 0 starts from the
/// same prior draws a `sample` run with this config would use.
///
/// DES reference: the edited attribute is scored against its target, every
/// other attribute against its own truth label before the stage.
pub fn edit_run(cfg: &RunConfig, world: &World, model: &ClassifierModel) -> Result<EditOutcome> {
    let g = &world.generator;
    let spec = &world.spec;
    let edits = parse_leaf_list(&cfg.experiment.edits, spec)?;
    let base = cfg.derived_seed(SeedPurpose::Sample);
    let chains = cfg.sampler.chains;
    let d = world.latent_dim();
    let start_rows: Vec<f64> = (0..chains)
        .flat_map(|c| Stream::for_item(base, c as u64).normal_vec(d))
        .collect();
    let start = RealArray::new(vec![chains, d], start_rows)?;
    let weights = cfg.experiment.edit_weights();
    let mut prev = start.clone();
    let mut code = AttributeCode::empty(spec.len());
    let mut stages = Vec::with_capacity(edits.len());
    for (i, &(attr, target)) in edits.iter().enumerate() {
        let states: Vec<EditState> = prev
            .row_iter()
            .map(|z| EditState {
                z_prev: z.to_vec(),
                edits: edits[..=i].to_vec(),
                weights,
                sigma_sq: cfg.experiment.sigma_sq,
            })
            .collect();
        let energies = states
            .iter()
            .map(|s| SeqEditEnergy::new(s, model, g))
            .collect::<lace_core::Result<Vec<_>>>()?;
        let refs: Vec<&dyn LatentEnergy> = energies.iter().map(|e| e as &dyn LatentEnergy).collect();
        let scfg = cfg.sampler.sampler_config(base.wrapping_add((i as u64) << 32))?;
        let init = (i > 0).then_some(&prev);
        let mut batch = sample_per_chain(&refs, &scfg, init)?;
        code.set(attr, Some(target));
        batch.expr = Some(format!("edit {} = {target}", spec.get(attr).name));

        let before = world.truth.label_latents(g, &prev);
        let after = world.truth.label_latents(g, &batch.latent);
        let n = chains as f64;
        let mean = |f: &dyn Fn(usize) -> f64| (0..chains).map(f).sum::<f64>() / n;
        let mut acc_before = vec![1.0; spec.len()];
        let mut acc_after = vec![0.0; spec.len()];
        for j in 0..spec.len() {
            if j == attr {
                acc_before[j] = mean(&|c| agreement(before[c][j], target));
                acc_after[j] = mean(&|c| agreement(after[c][j], target));
            } else {
                acc_after[j] = mean(&|c| agreement(after[c][j], before[c][j]));
            }
        }
        let des = des_score(&acc_before, &acc_after, attr)?;
        let drift = id_drift(&prev, &batch.latent, g)?;
        let acc = acc_score(&batch.latent, std::slice::from_ref(&code), &world.truth, g)?;
        prev = batch.latent.clone();
        stages.push(EditStage {
            attr,
            target,
            batch,
            code: code.clone(),
            acc_before,
            acc_after,
            des,
            id_drift: drift,
            acc,
        });
    }
    let last = stages.last().expect("at least one edit");
    let mut report = EvalReport::from_acc(spec, &last.acc, cfg.to_json_value());
    report.des_per_edit = stages.iter().map(|s| s.des).collect();
    report.des = Some(report.des_per_edit.iter().sum::<f64>() / stages.len() as f64);
    report.id_drift = stages.iter().map(|s| s.id_drift).collect();
    Ok(EditOutcome { start, stages, report })
}

/// `{1e-1, 5e-2, 1e-2, ..., 1e-5}`: nine tolerances.
pub const ODE_TOLERANCES: [f64; 9] = [1e-1, 5e-2, 1e-2, 5e-3, 1e-3, 5e-4, 1e-4, 5e-5, 1e-5];
pub const LD_STEPS: [usize; 8] = [50, 100, 200, 300, 400, 500, 600, 1000];
pub const LD_STEP_SIZES: [f64; 5] = [0.1, 0.05, 0.01, 0.005, 0.001];

/// Row configurations of a sweep, in row order.
pub fn sweep_configs(cfg: &RunConfig) -> Vec<RunConfig> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        c
    };
    let ode = || -> Vec<RunConfig> {
        ODE_TOLERANCES
            .iter()
            .flat_map(|&atol| {
                ODE_TOLERANCES.iter().map(move |&rtol| {
                    with(&|c| {
                        c.sampler.kind = SamplerName::Ode;
                        c.sampler.atol = atol;
                        c.sampler.rtol = rtol;
                    })
                })
            })
            .collect()
    };
    let ld = || -> Vec<RunConfig> {
        let mut rows = Vec::new();
        for &steps in &LD_STEPS {
            for &eta in &LD_STEP_SIZES {
                let mut noises: Vec<f64> = Vec::new();
                for sigma in [0.1, 0.05, eta] {
                    if !noises.contains(&sigma) {
                        noises.push(sigma);
                    }
                }
                for sigma in noises {
                    rows.push(with(&|c| {
                        c.sampler.kind = SamplerName::Ld;
                        c.sampler.steps = steps;
                        c.sampler.step_size = eta;
                        c.sampler.noise = sigma;
                        c.sampler.matched_noise = false;
                    }));
                }
            }
        }
        rows
    };
    match cfg.experiment.sweep {
        SweepGrid::Point => vec![cfg.clone()],
        SweepGrid::Ode => ode(),
        SweepGrid::Ld => ld(),
        SweepGrid::Both => ode().into_iter().chain(ld()).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub index: usize,
    pub sampler: SamplerName,
    pub atol: f64,
    pub rtol: f64,
    pub steps: usize,
    pub step_size: f64,
    pub noise: f64,
    pub acc: Option<f64>,
    pub tv: Option<f64>,
    pub mean_nfe: Option<f64>,
    pub error: Option<String>,
}

impl SweepRow {
    pub const HEADER: [&'static str; 11] = [
        "row", "sampler", "atol", "rtol", "steps", "step_size", "noise", "acc", "tv", "mean_nfe", "error",
    ];

    pub fn record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let ode = self.sampler == SamplerName::Ode;
        let only = |on: bool, v: String| if on { v } else { String::new() };
        vec![
            self.index.to_string(),
            format!("{:?}", self.sampler).to_lowercase(),
            only(ode, self.atol.to_string()),
            only(ode, self.rtol.to_string()),
            only(!ode, self.steps.to_string()),
            only(!ode, self.step_size.to_string()),
            only(!ode, self.noise.to_string()),
            opt(self.acc),
            opt(self.tv),
            opt(self.mean_nfe),
            self.error.clone().unwrap_or_default(),
        ]
    }
}

/// Runs every sweep row through [`sample_run`]; a failing row is recorded
/// with its error and the sweep continues. TV is computed for 2-D worlds.
pub fn sweep_run(
    cfg: &RunConfig,
    world: &World,
    model: &ClassifierModel,
    mut on_row: impl FnMut(&SweepRow) -> Result<()>,
) -> Result<Vec<SweepRow>> {
    let with_tv = world.latent_dim() == 2 && cfg.experiment.targets == TargetMode::Expr;
    let mut rows = Vec::new();
    for (index, row_cfg) in sweep_configs(cfg).into_iter().enumerate() {
        let s = &row_cfg.sampler;
        let mut row = SweepRow {
            index,
            sampler: s.kind,
            atol: s.atol,
            rtol: s.rtol,
            steps: s.steps,
            step_size: s.step_size,
            noise: s.noise,
            acc: None,
            tv: None,
            mean_nfe: None,
            error: None,
        };
        match sample_run(&row_cfg, world, model, with_tv) {
            Ok(out) => {
                row.acc = Some(out.score());
                row.tv = out.tv;
                row.mean_nfe = Some(out.batch.mean_nfe());
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        on_row(&row)?;
        rows.push(row);
    }
    Ok(rows)
}

pub enum OracleOutcome {
    Grid(GridDensity),
    Rejection(RejectionOutcome),
}

pub fn oracle_run(cfg: &RunConfig, world: &World, model: &ClassifierModel) -> Result<(EnergyExpr, OracleOutcome)> {
    if cfg.experiment.targets != TargetMode::Expr {
        return Err(CliError::config("oracles need a single expression, not uniform targets"));
    }
    let expr = parse_expr(cfg, &world.spec)?;
    let energy = ExprEnergy::new(&expr, model, &world.generator)?;
    let out = match cfg.experiment.oracle.unwrap_or(OracleKind::Grid) {
        OracleKind::Grid => OracleOutcome::Grid(grid_conditional_density(
            &energy,
            GridSpec::with_resolution(cfg.experiment.grid_resolution),
        )?),
        OracleKind::Rejection => OracleOutcome::Rejection(rejection_sample(
            &expr,
            &energy,
            cfg.experiment.oracle_samples,
            cfg.derived_seed(SeedPurpose::Oracle),
        )?),
    };
    Ok((expr, out))
}
