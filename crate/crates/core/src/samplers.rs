//! Latent samplers: Langevin dynamics, the probability-flow ODE (adaptive
//! Dormand-Prince 5(4) or fixed-step Euler) and a predictor-corrector scheme
//! for the reverse VP diffusion.
//!
//! Time convention: diffusion time `t` runs from `T` (noise) down to 0. The
//! ODE solvers integrate `s = T - t` forward from 0 to `T`, so the flow
//! `dz/dt = ½β(t)∇E_cond` becomes `dz/ds = -½β(T - s)∇E_cond`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{decode_head, ClassifierModel};
use crate::energy::LatentEnergy;
use crate::error::{Error, Result};
use crate::ndmath::{norm_sq, RealArray};
use crate::par;
use crate::rng::Stream;
use crate::worldgen::{AttributeCode, Generator};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_end: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
            t_end: 1.0,
        }
    }
}

impl DiffusionSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.beta_min && self.beta_min < self.beta_max && self.beta_max.is_finite()) {
            return Err(Error::arg("schedule needs 0 < beta_min < beta_max"));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::arg("schedule needs t_end > 0"));
        }
        Ok(())
    }

    fn beta(&self, t: f64) -> f64 {
        self.beta_min + (self.beta_max - self.beta_min) * t / self.t_end
    }

    /// `∫₀^T β(t) dt`.
    pub fn integral(&self) -> f64 {
        0.5 * (self.beta_min + self.beta_max) * self.t_end
    }
}

pub fn beta_at(schedule: &DiffusionSchedule, t: f64) -> Result<f64> {
    schedule.validate()?;
    if !(0.0..=schedule.t_end).contains(&t) {
        return Err(Error::arg(format!(
            "t = {t} outside [0, {}]",
            schedule.t_end
        )));
    }
    Ok(schedule.beta(t))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdConfig {
    pub steps: usize,
    pub step_size: f64,
    pub noise: f64,
    /// Use `noise = √step_size`, the unbiased discretisation.
    pub matched_noise: bool,
}

impl Default for LdConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            step_size: 0.01,
            noise: 0.01,
            matched_noise: false,
        }
    }
}

impl LdConfig {
    pub fn effective_noise(&self) -> f64 {
        if self.matched_noise {
            self.step_size.sqrt()
        } else {
            self.noise
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeConfig {
    pub atol: f64,
    pub rtol: f64,
    /// Adds the prior gradient `z` to the drift. The flow then no longer
    /// transports the prior onto itself; kept for demonstrations.
    pub prior_in_drift: bool,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self {
            atol: 1e-3,
            rtol: 1e-3,
            prior_in_drift: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EulerConfig {
    pub step_size: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcConfig {
    pub steps: usize,
    pub corrector_steps: usize,
    pub snr: f64,
}

impl Default for PcConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            corrector_steps: 1,
            snr: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerKind {
    Ld(LdConfig),
    Ode(OdeConfig),
    Euler(EulerConfig),
    Pc(PcConfig),
}

impl SamplerKind {
    pub fn name(&self) -> &'static str {
        match self {
            SamplerKind::Ld(_) => "ld",
            SamplerKind::Ode(_) => "ode",
            SamplerKind::Euler(_) => "euler",
            SamplerKind::Pc(_) => "pc",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub schedule: DiffusionSchedule,
    pub seed: u64,
    pub chains: usize,
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind, chains: usize, seed: u64) -> Self {
        Self {
            kind,
            schedule: DiffusionSchedule::default(),
            seed,
            chains,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::arg("chain count must be positive"));
        }
        self.schedule.validate()?;
        let positive = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::arg(format!("{what} must be positive")))
            }
        };
        match self.kind {
            SamplerKind::Ld(c) => {
                positive(c.step_size, "LD step size")?;
                if !c.matched_noise {
                    positive(c.noise, "LD noise")?;
                }
            }
            SamplerKind::Ode(c) => {
                positive(c.atol, "atol")?;
                positive(c.rtol, "rtol")?;
            }
            SamplerKind::Euler(c) => {
                positive(c.step_size, "Euler step size")?;
                euler_steps(c.step_size, self.schedule.t_end)?;
            }
            SamplerKind::Pc(c) => {
                if c.steps == 0 {
                    return Err(Error::arg("PC needs at least one predictor step"));
                }
                positive(c.snr, "snr")?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub final_energy: f64,
    pub nfe: u64,
    pub accepted_steps: u64,
    pub rejected_steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    /// `[chains, latent_dim]`.
    pub latent: RealArray,
    pub diagnostics: Vec<ChainDiagnostics>,
    pub config: SamplerConfig,
    /// Text of the conditioning expression, when known.
    pub expr: Option<String>,
}

impl SampleBatch {
    pub fn mean_nfe(&self) -> f64 {
        self.diagnostics.iter().map(|d| d.nfe as f64).sum::<f64>() / self.diagnostics.len() as f64
    }

    /// One row per chain: id, latent, data, per-attribute target and
    /// classifier prediction, final energy and NFE. `targets` holds either
    /// one code for every chain or one per chain.
    pub fn write_csv(
        &self,
        path: &Path,
        g: &Generator,
        model: &ClassifierModel,
        targets: &[AttributeCode],
    ) -> Result<()> {
        let n = self.latent.rows();
        if targets.len() != 1 && targets.len() != n {
            return Err(Error::arg("targets must hold one code or one per chain"));
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["chain_id".to_string()];
        header.extend((0..g.latent_dim()).map(|k| format!("z_{k}")));
        header.extend((0..g.data_dim()).map(|k| format!("x_{k}")));
        header.extend(model.spec.iter().map(|a| format!("target_{}", a.name)));
        header.extend(model.spec.iter().map(|a| format!("pred_{}", a.name)));
        header.push("final_energy".into());
        header.push("nfe".into());
        w.write_record(&header)?;
        for c in 0..n {
            let z = self.latent.row(c);
            let code = &targets[if targets.len() == 1 { 0 } else { c }];
            let heads = model.heads_one(&model.input_space.features(g, z)?);
            let mut row = vec![c.to_string()];
            row.extend(z.iter().map(f64::to_string));
            row.extend(g.apply_one(z).iter().map(f64::to_string));
            row.extend((0..model.spec.len()).map(|a| code.get(a).map_or(String::new(), |v| v.to_string())));
            row.extend(
                model
                    .spec
                    .iter()
                    .zip(&heads)
                    .map(|(a, h)| decode_head(&a.kind, h).to_string()),
            );
            row.push(self.diagnostics[c].final_energy.to_string());
            row.push(self.diagnostics[c].nfe.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_finite(z: &[f64], chain: usize, step: usize, what: &str) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "{what} chain {chain} produced a non-finite state at step {step}"
        )))
    }
}

/// Runs every chain with its own stream `seed + chain`; chain `c` starts
/// from row `c` of `init` or from a prior draw.
fn run_chains(
    energies: Energies<'_>,
    config: &SamplerConfig,
    init: Option<&RealArray>,
    step: impl Fn(usize, &dyn LatentEnergy, &mut Stream, Vec<f64>) -> Result<(Vec<f64>, ChainDiagnostics)>
        + Sync,
) -> Result<SampleBatch> {
    let d = energies.latent_dim(config.chains)?;
    let starts = initial_states(energies, config, init)?;
    let results = par::try_map_indexed(config.chains, |c| {
        let (mut rng, z0) = starts[c].clone();
        step(c, energies.get(c), &mut rng, z0)
    })?;
    let mut data = Vec::with_capacity(config.chains * d);
    let mut diagnostics = Vec::with_capacity(config.chains);
    for (z, diag) in results {
        data.extend(z);
        diagnostics.push(diag);
    }
    Ok(SampleBatch {
        latent: RealArray::new(vec![config.chains, d], data)?,
        diagnostics,
        config: *config,
        expr: None,
    })
}

/// Stream `seed + chain` for every chain, and its start: row `c` of `init`
/// or a prior draw from that stream.
fn initial_states(
    energies: Energies<'_>,
    config: &SamplerConfig,
    init: Option<&RealArray>,
) -> Result<Vec<(Stream, Vec<f64>)>> {
    config.validate()?;
    let d = energies.latent_dim(config.chains)?;
    if let Some(init) = init {
        init.expect_batch(d, "initial latents")?;
        if init.rows() != config.chains {
            return Err(Error::arg(format!(
                "{} initial latents for {} chains",
                init.rows(),
                config.chains
            )));
        }
    }
    Ok(par::map_indexed(config.chains, |c| {
        let mut rng = Stream::for_item(config.seed, c as u64);
        let z0 = match init {
            Some(a) => a.row(c).to_vec(),
            None => rng.normal_vec(d),
        };
        (rng, z0)
    }))
}

#[derive(Clone, Copy)]
enum Energies<'a> {
    Shared(&'a dyn LatentEnergy),
    PerChain(&'a [&'a dyn LatentEnergy]),
}

impl<'a> Energies<'a> {
    fn get(&self, chain: usize) -> &'a dyn LatentEnergy {
        match *self {
            Energies::Shared(e) => e,
            Energies::PerChain(es) => es[chain],
        }
    }

    fn latent_dim(&self, chains: usize) -> Result<usize> {
        match *self {
            Energies::Shared(e) => Ok(e.latent_dim()),
            Energies::PerChain(es) => {
                if es.len() != chains {
                    return Err(Error::arg(format!(
                        "{} energies for {chains} chains",
                        es.len()
                    )));
                }
                let d = es[0].latent_dim();
                if es.iter().any(|e| e.latent_dim() != d) {
                    return Err(Error::arg("per-chain energies disagree on the latent width"));
                }
                Ok(d)
            }
        }
    }
}

/// Dispatches on the sampler kind.
pub fn sample(
    energy: &dyn LatentEnergy,
    config: &SamplerConfig,
    init: Option<&RealArray>,
) -> Result<SampleBatch> {
    dispatch(Energies::Shared(energy), config, init)
}

/// Like [`sample`], but chain `c` targets `energies[c]`.
pub fn sample_per_chain(
    energies: &[&dyn LatentEnergy],
    config: &SamplerConfig,
    init: Option<&RealArray>,
) -> Result<SampleBatch> {
    dispatch(Energies::PerChain(energies), config, init)
}

fn dispatch(e: Energies<'_>, config: &SamplerConfig, init: Option<&RealArray>) -> Result<SampleBatch> {
    match config.kind {
        SamplerKind::Ld(c) => ld_chains(e, &c, config, init),
        SamplerKind::Ode(c) => ode_chains(e, &c, config, init),
        SamplerKind::Euler(c) => euler_chains(e, c.step_size, config, init),
        SamplerKind::Pc(c) => pc_chains(e, &c, config, init),
    }
}

/// `z ← z - (η/2)∇E(z) + σξ` on the full energy, including the prior.
pub fn sample_ld(
    energy: &dyn LatentEnergy,
    ld: &LdConfig,
    config: &SamplerConfig,
    init: Option<&RealArray>,
) -> Result<SampleBatch> {
    ld_chains(Energies::Shared(energy), ld, config, init)
}

fn ld_chains(
    energies: Energies<'_>,
    ld: &LdConfig,
    config: &SamplerConfig,
    init: Option<&RealArray>,
) -> Result<SampleBatch> {
    let config = SamplerConfig {
        kind: SamplerKind::Ld(*ld),
        ..*config
    };
    let sigma = ld.effective_noise();
    run_chains(energies, &config, init, |c, energy, rng, mut z| {
        let mut noise = vec![0.0; z.len()];
        for step in 0..ld.steps {
            let (_, grad) = energy.value_grad(&z)?;
            rng.fill_normal(&mut noise);
            for ((zi, gi), ni) in z.iter_mut().zip(&grad).zip(&noise) {
                *zi += -0.5 * ld.step_size * gi + sigma * ni;
            }
            check_finite(&z, c, step, "LD")?;
        }
        let final_energy = energy.value(&z)?;
        Ok((
            z,
            ChainDiagnostics {
                final_energy,
                nfe: ld.steps as u64,
                accepted_steps: ld.steps as u64,
                rejected_steps: 0,
            },
        ))
    })
}

/// Outcome of one adaptive integration.
#[derive(Clone, Debug, PartialEq)]
pub struct OdeSolution {
    pub y: Vec<f64>,
    pub nfe: u64,
    pub accepted: u64,
    pub rejected: u64,
}

const MIN_STEP: f64 = 1e-10;
const MAX_STEPS: u64 = 1_000_000;
const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const PI_BETA: f64 = 0.04;

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

fn scaled_rms(v: &[f64], y: &[f64], atol: f64, rtol: f64) -> f64 {
    let sum: f64 = v
        .iter()
        .zip(y)
        .map(|(vi, yi)| (vi / (atol + rtol * yi.abs())).powi(2))
        .sum();
    (sum / v.len().max(1) as f64).sqrt()
}

/// Integrates `dy/dt = f(t, y)` from `t0` to `t1 > t0` with Dormand-Prince
/// 5(4), FSAL, PI step control and the Hairer-Nørsett-Wanner starting step.
///
/// `f` reports time in its own units; a step below `1e-10` is reported as
/// [`Error::Stiffness`] at the `t` returned by `report_t`.
pub fn dopri5(
    mut f: impl FnMut(f64, &[f64]) -> Result<Vec<f64>>,
    t0: f64,
    t1: f64,
    y0: &[f64],
    atol: f64,
    rtol: f64,
    report_t: impl Fn(f64) -> f64,
) -> Result<OdeSolution> {
    let span = t1 - t0;
    if !(span > 0.0) {
        return Err(Error::arg("dopri5 needs t1 > t0"));
    }
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut k1 = f(t0, &y)?;
    let mut nfe = 1u64;

    // Starting step.
    let d0 = scaled_rms(&y, &y, atol, rtol);
    let d1 = scaled_rms(&k1, &y, atol, rtol);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    }
    .min(span);
    let probe: Vec<f64> = y.iter().zip(&k1).map(|(yi, ki)| yi + h0 * ki).collect();
    let f1 = f(t0 + h0, &probe)?;
    nfe += 1;
    let diff: Vec<f64> = f1.iter().zip(&k1).map(|(a, b)| a - b).collect();
    let d2 = scaled_rms(&diff, &y, atol, rtol) / h0;
    let mut h = if d1.max(d2) <= 1e-15 {
        // No information about the field's scale: try the whole span and let
        // the error estimate decide.
        span
    } else {
        (100.0 * h0).min((0.01 / d1.max(d2)).powf(0.2)).min(span)
    };

    let mut t = t0;
    let mut accepted = 0u64;
    let mut rejected = 0u64;
    let mut fac_old = 1e-4f64;
    let mut k = vec![vec![0.0; n]; 7];
    let mut stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut last_rejected = false;
    while t < t1 {
        if accepted + rejected >= MAX_STEPS {
            return Err(Error::Numeric(format!(
                "dopri5 exceeded {MAX_STEPS} steps at t = {}",
                report_t(t)
            )));
        }
        if h < MIN_STEP {
            return Err(Error::Stiffness {
                t: report_t(t),
                step: h,
            });
        }
        let at_end = t + h >= t1;
        if at_end {
            h = t1 - t;
        }
        k[0].copy_from_slice(&k1);
        for s in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, a) in A[s][..s].iter().enumerate() {
                    acc += a * k[j][i];
                }
                stage[i] = y[i] + h * acc;
            }
            k[s] = f(t + C[s] * h, &stage)?;
            if s == 6 {
                y_new.copy_from_slice(&stage);
            }
        }
        nfe += 6;
        let mut err_sum = 0.0;
        for i in 0..n {
            let mut e = 0.0;
            for (j, ej) in E.iter().enumerate() {
                e += ej * k[j][i];
            }
            let sc = atol + rtol * y[i].abs().max(y_new[i].abs());
            err_sum += (h * e / sc).powi(2);
        }
        let err = (err_sum / n.max(1) as f64).sqrt();
        if !err.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
            rejected += 1;
            h *= MIN_FACTOR;
            last_rejected = true;
            continue;
        }
        let fac11 = err.powf(0.2 - PI_BETA * 0.75);
        if err <= 1.0 {
            let fac = (fac11 / fac_old.powf(PI_BETA) / SAFETY).clamp(1.0 / MAX_FACTOR, 1.0 / MIN_FACTOR);
            let mut h_new = h / fac;
            if last_rejected {
                h_new = h_new.min(h);
            }
            fac_old = err.max(1e-4);
            accepted += 1;
            t = if at_end { t1 } else { t + h };
            std::mem::swap(&mut y, &mut y_new);
            k1.copy_from_slice(&k[6]);
            h = h_new;
            last_rejected = false;
        } else {
            rejected += 1;
            h /= (fac11 / SAFETY).min(1.0 / MIN_FACTOR);
            last_rejected = true;
        }
    }
    Ok(OdeSolution {
        y,
        nfe,
        accepted,
        rejected,
    })
}

fn flow_drift(
    energy: &dyn LatentEnergy,
    schedule: &DiffusionSchedule,
    prior_in_drift: bool,
    s: f64,
    z: &[f64],
) -> Result<Vec<f64>> {
    let (_, mut grad) = energy.cond_value_grad(z)?;
    if prior_in_drift {
        for (gi, zi) in grad.iter_mut().zip(z) {
            *gi += zi;
        }
    }
    let scale = -0.5 * schedule.beta(schedule.t_end - s);
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok(grad)
}

/// Carries `z(T)` to `z(0)` along the probability-flow ODE.
pub fn integrate_flow(
    energy: &dyn LatentEnergy,
    z_end: &[f64],
    ode: &OdeConfig,
    schedule: &DiffusionSchedule,
) -> Result<OdeSolution> {
    let t_end = schedule.t_end;
    dopri5(
        |s, z| flow_drift(energy, schedule, ode.prior_in_drift, s, z),
        0.0,
        t_end,
        z_end,
        ode.atol,
        ode.rtol,
        |s| t_end - s,
    )
}

/// Solver check on `dz = ½β(t)(-z)dt`, whose solution is
/// `z(0) = z(T)·exp(½∫₀^T β)`. Returns the numerical and exact end points.
pub fn linear_validation(
    z_end: &[f64],
    atol: f64,
    rtol: f64,
    schedule: &DiffusionSchedule,
) -> Result<(OdeSolution, Vec<f64>)> {
    let field = crate::energy::QuadraticEnergy {
        dim: z_end.len(),
        scale: -1.0,
    };
    let ode = OdeConfig {
        atol,
        rtol,
        prior_in_drift: false,
    };
    let sol = integrate_flow(&field, z_end, &ode, schedule)?;
    let growth = (0.5 * schedule.integral()).exp();
    Ok((sol, z_end.iter().map(|z| z * growth).collect()))
}

pub fn sample_ode(
    energy: &dyn LatentEnergy,
    ode: &OdeConfig,
    config: &SamplerConfig,
    init: Option<&RealArray>,
) -> Result<SampleBatch> {
    ode_chains(Energies::Shared(energy), ode, config, init)
}

fn ode_chains(
    energies: Energies<'_>,
    ode: &OdeConfig,
    config: &SamplerConfig,
    init: Option<&RealArray>,
) -> Result<SampleBatch> {
    let config = SamplerConfig {
        kind: SamplerKind::Ode(*ode),
        ..*config
    };
    run_chains(energies, &config, init, |_, energy, _, z| {
        let sol = integrate_flow(energy, &z, ode, &config.schedule)?;
        let final_energy = energy.value(&sol.y)?;
        Ok((
            sol.y,
            ChainDiagnostics {
                final_energy,
                nfe: sol.nfe,
                accepted_steps: sol.accepted,
                rejected_steps: sol.rejected,
            },
        ))
    })
}

fn euler_steps(step_size: f64, t_end: f64) -> Result<usize> {
    let n = (t_end / step_size).round();
    if n < 10.0 || ((n * step_size - t_end) / t_end).abs() > 1e-9 {
        return Err(Error::arg(format!(
            "Euler step {step_size} must divide T = {t_end} into at least 10 steps"
        )));
    }
    Ok(n as usize)
}

/// Fixed-step explicit Euler on the probability-flow ODE.
pub fn sample_euler(
    energy: &dyn LatentEnergy,
    step_size: f64,
    config: &SamplerConfig,
    init: Option<&RealArray>,
) -> Result<SampleBatch> {
    euler_chains(Energies::Shared(energy), step_size, config, init)
}

fn euler_chains(
    energies: Energies<'_>,
    step_size: f64,
    config: &SamplerConfig,
    init: Option<&RealArray>,
) -> Result<SampleBatch> {
    let config = SamplerConfig {
        kind: SamplerKind::Euler(EulerConfig { step_size }),
        ..*config
    };
    config.validate()?;
    let schedule = config.schedule;
    let n = euler_steps(step_size, schedule.t_end)?;
    let h = schedule.t_end / n as f64;
    run_chains(energies, &config, init, |c, energy, _, mut z| {
        for step in 0..n {
            let drift = flow_drift(energy, &schedule, false, step as f64 * h, &z)?;
            for (zi, di) in z.iter_mut().zip(&drift) {
                *zi += h * di;
            }
            check_finite(&z, c, step, "Euler")?;
        }
        let final_energy = energy.value(&z)?;
        Ok((
            z,
            ChainDiagnostics {
                final_energy,
                nfe: n as u64,
                accepted_steps: n as u64,
                rejected_steps: 0,
            },
        ))
    })
}

/// Score `-z - ∇E_cond(z)` of the time-invariant conditional latent density.
fn score(energy: &dyn LatentEnergy, z: &[f64]) -> Result<Vec<f64>> {
    let (_, grad) = energy.cond_value_grad(z)?;
    Ok(z.iter().zip(grad).map(|(zi, gi)| -zi - gi).collect())
}

struct PcChain {
    rng: Stream,
    z: Vec<f64>,
    score: Vec<f64>,
    noise: Vec<f64>,
    nfe: u64,
}

/// Reverse VP-SDE: per time step, `M` Langevin corrector moves, then one
/// Euler-Maruyama predictor move.
///
/// The corrector step size `ε = 2 (r ‖ξ‖ / ‖s‖)²` uses the norms averaged
/// over the batch, so chains advance in lockstep and a batch result depends
/// on its size. Per-chain norms make `ε` explode whenever one chain's score
/// passes near zero, which in low dimension happens routinely.
pub fn sample_pc(
    energy: &dyn LatentEnergy,
    pc: &PcConfig,
    config: &SamplerConfig,
    init: Option<&RealArray>,
) -> Result<SampleBatch> {
    pc_chains(Energies::Shared(energy), pc, config, init)
}

fn pc_chains(
    energies: Energies<'_>,
    pc: &PcConfig,
    config: &SamplerConfig,
    init: Option<&RealArray>,
) -> Result<SampleBatch> {
    let config = SamplerConfig {
        kind: SamplerKind::Pc(*pc),
        ..*config
    };
    let schedule = config.schedule;
    let dt = schedule.t_end / pc.steps as f64;
    let mut chains: Vec<PcChain> = initial_states(energies, &config, init)?
        .into_iter()
        .map(|(rng, z)| PcChain {
            score: vec![0.0; z.len()],
            noise: vec![0.0; z.len()],
            rng,
            z,
            nfe: 0,
        })
        .collect();
    let n = chains.len() as f64;
    for step in 0..pc.steps {
        let t = schedule.t_end - step as f64 * dt;
        for _ in 0..pc.corrector_steps {
            par::try_for_each_mut(&mut chains, |c, ch| {
                ch.score = score(energies.get(c), &ch.z)?;
                ch.nfe += 1;
                ch.rng.fill_normal(&mut ch.noise);
                Ok::<_, Error>(())
            })?;
            let s_norm = chains.iter().map(|ch| norm_sq(&ch.score).sqrt()).sum::<f64>() / n;
            if s_norm < 1e-12 {
                continue;
            }
            let xi_norm = chains.iter().map(|ch| norm_sq(&ch.noise).sqrt()).sum::<f64>() / n;
            let eps = 2.0 * (pc.snr * xi_norm / s_norm).powi(2);
            let amp = (2.0 * eps).sqrt();
            for ch in &mut chains {
                for ((zi, si), ni) in ch.z.iter_mut().zip(&ch.score).zip(&ch.noise) {
                    *zi += eps * si + amp * ni;
                }
            }
        }
        let beta = schedule.beta(t);
        let amp = (beta * dt).sqrt();
        par::try_for_each_mut(&mut chains, |c, ch| {
            let (_, grad) = energies.get(c).cond_value_grad(&ch.z)?;
            ch.nfe += 1;
            ch.rng.fill_normal(&mut ch.noise);
            for ((zi, gi), ni) in ch.z.iter_mut().zip(&grad).zip(&ch.noise) {
                *zi += -0.5 * beta * *zi * dt - beta * gi * dt + amp * ni;
            }
            check_finite(&ch.z, c, step, "PC")
        })?;
    }
    let d = chains.first().map_or(0, |ch| ch.z.len());
    let finals = par::try_map_indexed(chains.len(), |c| energies.get(c).value(&chains[c].z))?;
    let mut data = Vec::with_capacity(chains.len() * d);
    let mut diagnostics = Vec::with_capacity(chains.len());
    for (ch, final_energy) in chains.into_iter().zip(finals) {
        data.extend(ch.z);
        diagnostics.push(ChainDiagnostics {
            final_energy,
            nfe: ch.nfe,
            accepted_steps: pc.steps as u64,
            rejected_steps: 0,
        });
    }
    Ok(SampleBatch {
        latent: RealArray::new(vec![config.chains, d], data)?,
        diagnostics,
        config,
        expr: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::QuadraticEnergy;

    #[test]
    fn beta_examples() {
        let s = DiffusionSchedule::default();
        assert_eq!(beta_at(&s, 0.0).unwrap(), 0.1);
        assert_eq!(beta_at(&s, 1.0).unwrap(), 20.0);
        assert!((beta_at(&s, 0.5).unwrap() - 10.05).abs() < 1e-12);
        assert!(beta_at(&s, 1.5).is_err());
        assert!(beta_at(&s, -0.1).is_err());
    }

    fn zero2() -> QuadraticEnergy {
        QuadraticEnergy { dim: 2, scale: 0.0 }
    }

    #[test]
    fn zero_drift_ode_is_identity() {
        let cfg = SamplerConfig::new(SamplerKind::Ode(OdeConfig::default()), 50, 3);
        let init = RealArray::new(vec![50, 2], Stream::new(1).normal_vec(100)).unwrap();
        let out = sample(&zero2(), &cfg, Some(&init)).unwrap();
        assert_eq!(out.latent, init);
        assert!(out.diagnostics.iter().all(|d| d.nfe == 8 && d.accepted_steps == 1));
    }

    #[test]
    fn ld_with_no_steps_returns_init() {
        let cfg = SamplerConfig::new(
            SamplerKind::Ld(LdConfig {
                steps: 0,
                ..LdConfig::default()
            }),
            10,
            0,
        );
        let a = sample(&zero2(), &cfg, None).unwrap();
        let mut rng = Stream::for_item(0, 4);
        assert_eq!(a.latent.row(4), rng.normal_vec(2).as_slice());
    }

    #[test]
    fn euler_accounting() {
        let cfg = SamplerConfig::new(SamplerKind::Euler(EulerConfig { step_size: 1e-3 }), 4, 0);
        let out = sample(&zero2(), &cfg, None).unwrap();
        assert!(out.diagnostics.iter().all(|d| d.nfe == 1000));
        let bad = SamplerConfig::new(SamplerKind::Euler(EulerConfig { step_size: 0.2 }), 4, 0);
        assert!(sample(&zero2(), &bad, None).is_err());
    }

    #[test]
    fn single_pc_step_is_analytic() {
        let pc = PcConfig {
            steps: 1,
            corrector_steps: 0,
            snr: 0.05,
        };
        let cfg = SamplerConfig::new(SamplerKind::Pc(pc), 3, 9);
        let init = RealArray::new(vec![3, 2], vec![1.0, -1.0, 0.5, 2.0, 0.0, 0.0]).unwrap();
        let out = sample(&zero2(), &cfg, Some(&init)).unwrap();
        for c in 0..3 {
            let mut rng = Stream::for_item(9, c as u64);
            let xi = rng.normal_vec(2);
            for k in 0..2 {
                let z = init.row(c)[k];
                let want = z - 0.5 * 20.0 * z + 20f64.sqrt() * xi[k];
                assert!((out.latent.row(c)[k] - want).abs() < 1e-12);
            }
        }
        assert_eq!(out, sample(&zero2(), &cfg, Some(&init)).unwrap());
    }

    #[test]
    fn linear_problem_meets_tolerance() {
        let s = DiffusionSchedule::default();
        let mut last_nfe = 0;
        for tol in [1e-2, 1e-3, 1e-4] {
            let (sol, exact) = linear_validation(&[0.3, -1.2], tol, tol, &s).unwrap();
            for (a, b) in sol.y.iter().zip(&exact) {
                assert!((a - b).abs() <= 10.0 * (tol + tol * b.abs()), "{tol}: {a} vs {b}");
            }
            assert!(sol.nfe > last_nfe);
            last_nfe = sol.nfe;
        }
    }

    #[test]
    fn chains_do_not_depend_on_chain_count() {
        let e = QuadraticEnergy { dim: 2, scale: 0.5 };
        let few = SamplerConfig::new(SamplerKind::Ld(LdConfig::default()), 3, 5);
        let many = SamplerConfig { chains: 9, ..few };
        let a = sample(&e, &few, None).unwrap();
        let b = sample(&e, &many, None).unwrap();
        for c in 0..3 {
            assert_eq!(a.latent.row(c), b.latent.row(c));
        }
    }
}
