//! `lace`: train attribute classifiers on a synthetic world, then sample,
//! edit, evaluate, sweep and compare against exact oracles.
//!
//! Every subcommand reads a [`config::RunConfig`] (TOML file and/or
//! overrides), writes CSV tables plus a `<command>.meta.json` sidecar into
//! the output directory and prints a short summary.

pub mod commands;
pub mod config;
pub mod error;
pub mod protocol;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_override, RunConfig};
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "lace", version, about = "Latent-space energy-based controllable generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run config, or a `.meta.json` sidecar of an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set sampler.atol=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SamplerFlags {
    /// ld, ode, euler or pc.
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long)]
    chains: Option<usize>,
    /// Steps N of LD and PC.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesise a dataset and train the attribute classifier.
    Train {
        #[command(flatten)]
        common: Common,
        /// Attribute combination withheld from training, e.g. "attr0=1,attr1=3".
        #[arg(long)]
        holdout: Option<String>,
        #[arg(long)]
        dataset_size: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Draw conditional samples for an energy expression.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        expr: Option<String>,
        /// Give every chain its own uniformly drawn attribute code.
        #[arg(long)]
        uniform_targets: bool,
        /// `rejection`: draw exactly instead; `grid`: also report TV.
        #[arg(long)]
        oracle: Option<String>,
    },
    /// Apply a sequence of attribute edits.
    Edit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampler: SamplerFlags,
        /// Comma-separated edits, e.g. "attr0=1, attr1=2, attr2=0.8".
        #[arg(long)]
        edits: Option<String>,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        alpha0: Option<f64>,
        #[arg(long)]
        alpha1: Option<f64>,
    },
    /// Score a samples CSV with the truth oracle.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Run the ODE and/or LD hyperparameter grids.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// point, ode, ld or both.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        chains: Option<usize>,
        #[arg(long)]
        expr: Option<String>,
    },
    /// Exact reference: grid density or rejection draws.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// grid or rejection.
        #[arg(long)]
        oracle: Option<String>,
        #[arg(long)]
        expr: Option<String>,
        /// Number of rejection draws.
        #[arg(long)]
        samples: Option<usize>,
    },
}

struct Overrides(Vec<(String, toml::Value)>);

impl Overrides {
    fn new(common: &Common) -> Result<Self> {
        let mut o = Overrides(Vec::new());
        for s in &common.set {
            o.0.push(parse_override(s)?);
        }
        o.int("seed", common.seed.map(|s| s as usize));
        o.path("output_dir", &common.out);
        o.path("classifier.checkpoint", &common.checkpoint);
        Ok(o)
    }

    fn text(&mut self, key: &str, v: &Option<String>) {
        if let Some(v) = v {
            self.0.push((key.into(), toml::Value::String(v.clone())));
        }
    }

    fn path(&mut self, key: &str, v: &Option<PathBuf>) {
        self.text(key, &v.as_ref().map(|p| p.to_string_lossy().into_owned()));
    }

    fn int(&mut self, key: &str, v: Option<usize>) {
        if let Some(v) = v {
            self.0.push((key.into(), toml::Value::Integer(v as i64)));
        }
    }

    fn float(&mut self, key: &str, v: Option<f64>) {
        if let Some(v) = v {
            self.0.push((key.into(), toml::Value::Float(v)));
        }
    }

    fn sampler(&mut self, f: &SamplerFlags) {
        self.text("sampler.kind", &f.sampler);
        self.int("sampler.chains", f.chains);
        self.int("sampler.steps", f.steps);
    }

    fn load(self, common: &Common) -> Result<RunConfig> {
        RunConfig::load(common.config.as_deref(), &self.0)
    }
}

fn execute(command: Command) -> Result<commands::CommandOutput> {
    match command {
        Command::Train {
            common,
            holdout,
            dataset_size,
            epochs,
        } => {
            let mut o = Overrides::new(&common)?;
            o.text("classifier.holdout", &holdout);
            o.int("classifier.dataset_size", dataset_size);
            o.int("classifier.epochs", epochs);
            commands::cmd_train(&o.load(&common)?)
        }
        Command::Sample {
            common,
            sampler,
            expr,
            uniform_targets,
            oracle,
        } => {
            let mut o = Overrides::new(&common)?;
            o.sampler(&sampler);
            o.text("experiment.expr", &expr);
            if uniform_targets {
                o.text("experiment.targets", &Some("uniform".into()));
            }
            o.text("experiment.oracle", &oracle);
            commands::cmd_sample(&o.load(&common)?)
        }
        Command::Edit {
            common,
            sampler,
            edits,
            mu,
            gamma,
            alpha0,
            alpha1,
        } => {
            let mut o = Overrides::new(&common)?;
            o.sampler(&sampler);
            o.text("experiment.edits", &edits);
            o.float("experiment.mu", mu);
            o.float("experiment.gamma", gamma);
            o.float("experiment.alpha0", alpha0);
            o.float("experiment.alpha1", alpha1);
            commands::cmd_edit(&o.load(&common)?)
        }
        Command::Eval { common, samples } => {
            let mut o = Overrides::new(&common)?;
            o.path("experiment.samples", &samples);
            commands::cmd_eval(&o.load(&common)?)
        }
        Command::Sweep {
            common,
            grid,
            chains,
            expr,
        } => {
            let mut o = Overrides::new(&common)?;
            o.text("experiment.sweep", &grid);
            o.int("sampler.chains", chains);
            o.text("experiment.expr", &expr);
            commands::cmd_sweep(&o.load(&common)?)
        }
        Command::Oracle {
            common,
            oracle,
            expr,
            samples,
        } => {
            let mut o = Overrides::new(&common)?;
            o.text("experiment.oracle", &oracle);
            o.text("experiment.expr", &expr);
            o.int("experiment.oracle_samples", samples);
            commands::cmd_oracle(&o.load(&common)?)
        }
    }
}

/// Runs the CLI on `args` (including the program name), printing to stdout
/// and stderr, and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(out) => {
            for line in out.lines {
                println!("{line}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
