//! Run configuration: a TOML file with four sections, overridable key by
//! key from the command line.
//!
//! ```toml
//! seed = 0
//! output_dir = "lace-out"
//!
//! [world]
//! kind = "benchmark"      # or "half_plane"
//! latent_dim = 8
//!
//! [sampler]
//! kind = "ode"
//! chains = 1000
//!
//! [experiment]
//! expr = "attr0=1"
//! ```
//!
//! Overrides use dotted keys (`sampler.atol=1e-4`); the value is read as a
//! TOML literal and falls back to a plain string.

use std::path::{Path, PathBuf};

use lace_core::classifier::{ClassifierMode, InputSpace, TrainConfig};
use lace_core::energy::{EditWeights, DEFAULT_SIGMA_SQ};
use lace_core::samplers::{
    DiffusionSchedule, EulerConfig, LdConfig, OdeConfig, PcConfig, SamplerConfig, SamplerKind,
};
use lace_core::worldgen::{GeneratorKind, World, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub world: WorldSection,
    pub classifier: ClassifierSection,
    pub sampler: SamplerSection,
    pub experiment: ExperimentSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("lace-out"),
            world: WorldSection::default(),
            classifier: ClassifierSection::default(),
            sampler: SamplerSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldKind {
    Benchmark,
    HalfPlane,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub kind: WorldKind,
    pub latent_dim: usize,
    pub data_dim: usize,
    pub generator: GeneratorKind,
    pub seed: u64,
}

impl Default for WorldSection {
    fn default() -> Self {
        let b = WorldConfig::bench8();
        Self {
            kind: WorldKind::Benchmark,
            latent_dim: b.latent_dim,
            data_dim: b.data_dim,
            generator: b.generator,
            seed: b.seed,
        }
    }
}

impl WorldSection {
    /// The 2-D plane world used for oracle comparisons.
    pub fn plane() -> Self {
        let p = WorldConfig::plane();
        Self {
            kind: WorldKind::Benchmark,
            latent_dim: p.latent_dim,
            data_dim: p.data_dim,
            generator: p.generator,
            seed: p.seed,
        }
    }

    pub fn build(&self) -> Result<World> {
        Ok(match self.kind {
            WorldKind::Benchmark => World::benchmark(&WorldConfig {
                latent_dim: self.latent_dim,
                data_dim: self.data_dim,
                generator: self.generator,
                seed: self.seed,
            })?,
            WorldKind::HalfPlane => {
                if self.latent_dim != self.data_dim {
                    return Err(CliError::config("half_plane world needs latent_dim == data_dim"));
                }
                World::half_plane(self.latent_dim)?
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub dataset_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub milestones: Vec<usize>,
    pub mode: ClassifierMode,
    pub input_space: InputSpace,
    /// Attribute combination withheld from training, e.g. `"attr0=1,attr1=3"`.
    pub holdout: Option<String>,
    pub label_noise: f64,
    /// Checkpoint to write (train) or read (other commands); defaults to
    /// `<output_dir>/checkpoint.json`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            dataset_size: 10_000,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            decay_factor: t.decay_factor,
            milestones: t.milestones,
            mode: t.mode,
            input_space: t.input_space,
            holdout: None,
            label_noise: 0.0,
            checkpoint: None,
        }
    }
}

impl ClassifierSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            decay_factor: self.decay_factor,
            milestones: self.milestones.clone(),
            seed,
            mode: self.mode,
            input_space: self.input_space,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerName {
    Ld,
    Ode,
    Euler,
    Pc,
}

/// Flat sampler settings; `steps` is `N` for both LD and PC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub kind: SamplerName,
    pub chains: usize,
    pub steps: usize,
    pub step_size: f64,
    pub noise: f64,
    pub matched_noise: bool,
    pub atol: f64,
    pub rtol: f64,
    pub prior_in_drift: bool,
    pub euler_step: f64,
    pub corrector_steps: usize,
    pub snr: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_end: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let ld = LdConfig::default();
        let ode = OdeConfig::default();
        let pc = PcConfig::default();
        let s = DiffusionSchedule::default();
        Self {
            kind: SamplerName::Ode,
            chains: 1000,
            steps: ld.steps,
            step_size: ld.step_size,
            noise: ld.noise,
            matched_noise: ld.matched_noise,
            atol: ode.atol,
            rtol: ode.rtol,
            prior_in_drift: ode.prior_in_drift,
            euler_step: 1e-3,
            corrector_steps: pc.corrector_steps,
            snr: pc.snr,
            beta_min: s.beta_min,
            beta_max: s.beta_max,
            t_end: s.t_end,
        }
    }
}

impl SamplerSection {
    pub fn sampler_config(&self, seed: u64) -> Result<SamplerConfig> {
        let kind = match self.kind {
            SamplerName::Ld => SamplerKind::Ld(LdConfig {
                steps: self.steps,
                step_size: self.step_size,
                noise: self.noise,
                matched_noise: self.matched_noise,
            }),
            SamplerName::Ode => SamplerKind::Ode(OdeConfig {
                atol: self.atol,
                rtol: self.rtol,
                prior_in_drift: self.prior_in_drift,
            }),
            SamplerName::Euler => SamplerKind::Euler(EulerConfig {
                step_size: self.euler_step,
            }),
            SamplerName::Pc => SamplerKind::Pc(PcConfig {
                steps: self.steps,
                corrector_steps: self.corrector_steps,
                snr: self.snr,
            }),
        };
        let cfg = SamplerConfig {
            schedule: DiffusionSchedule {
                beta_min: self.beta_min,
                beta_max: self.beta_max,
                t_end: self.t_end,
            },
            ..SamplerConfig::new(kind, self.chains, seed)
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Every chain targets `experiment.expr`.
    Expr,
    /// Chain `c` targets its own uniformly drawn attribute code.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    Grid,
    Rejection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepGrid {
    /// The configured sampler alone.
    Point,
    Ode,
    Ld,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub expr: String,
    pub targets: TargetMode,
    pub sigma_sq: f64,
    /// `sample`: draw from this oracle instead of the sampler (`rejection`)
    /// or also report TV to it (`grid`). `oracle`: which oracle to run.
    pub oracle: Option<OracleKind>,
    pub grid_resolution: usize,
    /// Number of exact draws for `oracle` with `rejection`.
    pub oracle_samples: usize,
    /// Comma-separated leaf edits applied in order.
    pub edits: String,
    pub mu: f64,
    pub gamma: f64,
    pub alpha0: f64,
    pub alpha1: Option<f64>,
    pub sweep: SweepGrid,
    /// Samples CSV scored by `eval`.
    pub samples: Option<PathBuf>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let w = EditWeights::default();
        Self {
            expr: "attr0=1".into(),
            targets: TargetMode::Expr,
            sigma_sq: DEFAULT_SIGMA_SQ,
            oracle: None,
            grid_resolution: 128,
            oracle_samples: 20_000,
            edits: "attr0=1, attr1=2, attr2=0.8".into(),
            mu: w.mu,
            gamma: w.gamma,
            alpha0: w.alpha0,
            alpha1: w.alpha1,
            sweep: SweepGrid::Both,
            samples: None,
        }
    }
}

impl ExperimentSection {
    pub fn edit_weights(&self) -> EditWeights {
        EditWeights {
            mu: self.mu,
            gamma: self.gamma,
            alpha0: self.alpha0,
            alpha1: self.alpha1,
        }
    }
}

/// Purposes of the streams derived from the run seed. Derived seeds are
/// spaced `2^40` apart so per-item streams (`seed + index`) never overlap.
#[derive(Clone, Copy, Debug)]
pub enum SeedPurpose {
    Data = 0,
    Train = 1,
    Sample = 2,
    Targets = 3,
    Oracle = 4,
    LabelNoise = 5,
}

impl RunConfig {
    pub fn derived_seed(&self, purpose: SeedPurpose) -> u64 {
        self.seed.wrapping_add((purpose as u64) << 40)
    }

    /// Reads `path` (TOML, or the `config` object of a JSON metadata
    /// sidecar), applies `overrides` and resolves every path.
    pub fn load(path: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut table = match path {
            None => toml::Table::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                if p.extension().is_some_and(|e| e == "json") {
                    sidecar_table(&text, p)?
                } else {
                    text.parse::<toml::Table>()
                        .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
                }
            }
        };
        for (key, value) in overrides {
            set_path(&mut table, key, value.clone())?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(e.to_string()))?;
        cfg.resolve_paths()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self) -> Result<()> {
        let abs = |p: &Path| {
            std::path::absolute(p)
                .map_err(|e| CliError::config(format!("cannot resolve {}: {e}", p.display())))
        };
        self.output_dir = abs(&self.output_dir)?;
        if let Some(c) = &self.classifier.checkpoint {
            self.classifier.checkpoint = Some(abs(c)?);
        }
        if let Some(s) = &self.experiment.samples {
            self.experiment.samples = Some(abs(s)?);
        }
        Ok(())
    }

    /// Checks everything that can be checked before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.classifier.dataset_size == 0 {
            return Err(CliError::config("classifier.dataset_size must be positive"));
        }
        self.classifier.train_config(0).validate()?;
        self.sampler.sampler_config(0)?;
        if self.experiment.sigma_sq.is_nan() || self.experiment.sigma_sq <= 0.0 {
            return Err(CliError::config("experiment.sigma_sq must be positive"));
        }
        if self.experiment.grid_resolution == 0 || self.experiment.oracle_samples == 0 {
            return Err(CliError::config(
                "experiment.grid_resolution and oracle_samples must be positive",
            ));
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.classifier
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("checkpoint.json"))
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config is always serialisable")
    }
}

fn sidecar_table(text: &str, path: &Path) -> Result<toml::Table> {
    let doc: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let config = doc
        .get("config")
        .ok_or_else(|| CliError::config(format!("{}: no `config` object", path.display())))?;
    let value = toml::Value::try_from(strip_nulls(config.clone()))
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    match value {
        toml::Value::Table(t) => Ok(t),
        _ => Err(CliError::config(format!("{}: `config` is not an object", path.display()))),
    }
}

/// TOML has no null; absent keys already mean `None`.
fn strip_nulls(v: serde_json::Value) -> serde_json::Value {
    match v {
        serde_json::Value::Object(map) => serde_json::Value::Object(
            map.into_iter()
                .filter(|(_, v)| !v.is_null())
                .map(|(k, v)| (k, strip_nulls(v)))
                .collect(),
        ),
        other => other,
    }
}

/// Splits `KEY=VALUE`; the value is read as a TOML literal, falling back to
/// a plain string.
pub fn parse_override(text: &str) -> Result<(String, toml::Value)> {
    let (key, value) = text
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override '{text}' is not KEY=VALUE")))?;
    Ok((key.trim().to_string(), parse_value(value.trim())))
}

fn parse_value(text: &str) -> toml::Value {
    format!("v = {text}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("malformed override key '{key}'")));
    }
    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        let entry = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(CliError::config(format!("override '{key}': '{part}' is not a section"))),
        };
    }
    current.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
