use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lace_core::classifier::save_checkpoint;
use lace_core::eval::{acc_from_labels, EvalReport};
use lace_core::ndmath::RealArray;
use lace_core::rng::PRNG_NAME;
use lace_core::worldgen::{AttrValue, AttributeCode, AttributeKind, AttributeSpec};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::protocol::{self, OracleOutcome};

/// Human-readable summary lines and the files a command wrote.
#[derive(Debug, Default)]
pub struct CommandOutput {
    pub lines: Vec<String>,
    pub files: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    command: &'a str,
    config: &'a RunConfig,
    seed: u64,
    prng: &'static str,
    lace_version: &'static str,
    wall_time_seconds: f64,
    outputs: Vec<String>,
}

fn prepare(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Writes through a temporary sibling and renames it into place.
fn atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    write(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic(path, |tmp| fs::write(tmp, text).map_err(|e| CliError::io(tmp, e)))
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    atomic(path, |tmp| {
        let mut w = csv::Writer::from_path(tmp)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| CliError::io(tmp, e))
    })
}

fn finish(command: &str, cfg: &RunConfig, started: Instant, mut out: CommandOutput) -> Result<CommandOutput> {
    let path = cfg.output_dir.join(format!("{command}.meta.json"));
    let sidecar = Sidecar {
        command,
        config: cfg,
        seed: cfg.seed,
        prng: PRNG_NAME,
        lace_version: env!("CARGO_PKG_VERSION"),
        wall_time_seconds: started.elapsed().as_secs_f64(),
        outputs: out
            .files
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| CliError::config(format!("cannot encode metadata: {e}")))?;
    text.push('\n');
    write_text(&path, &text)?;
    out.files.push(path);
    Ok(out)
}

fn fmt_acc(spec: &AttributeSpec, per_attribute: &[Option<f64>]) -> String {
    spec.iter()
        .zip(per_attribute)
        .filter_map(|(a, v)| v.map(|v| format!("{} {v:.4}", a.name)))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn cmd_train(cfg: &RunConfig) -> Result<CommandOutput> {
    let started = Instant::now();
    prepare(&cfg.output_dir)?;
    let t = protocol::train(cfg)?;
    let ckpt = cfg.checkpoint_path();
    if let Some(parent) = ckpt.parent() {
        prepare(parent)?;
    }
    atomic(&ckpt, |tmp| Ok(save_checkpoint(&t.model, tmp)?))?;
    let train_cfg = cfg.classifier.train_config(0);
    let losses: Vec<Vec<String>> = t
        .report
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(e, l)| vec![e.to_string(), train_cfg.learning_rate_at(e).to_string(), l.to_string()])
        .collect();
    let loss_path = cfg.output_dir.join("train_loss.csv");
    write_csv(&loss_path, &["epoch", "learning_rate", "loss"].map(String::from), &losses)?;
    let per: Vec<Option<f64>> = t.report.train_accuracy.iter().map(|&a| Some(a)).collect();
    let out = CommandOutput {
        lines: vec![
            format!("trained on {} pairs", t.train_size),
            format!(
                "train ACC {:.4} ({})",
                t.report.aggregate_accuracy(),
                fmt_acc(&t.world.spec, &per)
            ),
            format!("checkpoint {}", ckpt.display()),
        ],
        files: vec![ckpt, loss_path],
    };
    finish("train", cfg, started, out)
}

pub fn cmd_sample(cfg: &RunConfig) -> Result<CommandOutput> {
    let started = Instant::now();
    let (world, model) = protocol::load(cfg)?;
    prepare(&cfg.output_dir)?;
    let out = protocol::sample_run(cfg, &world, &model, false)?;
    let path = cfg.output_dir.join("samples.csv");
    atomic(&path, |tmp| Ok(out.batch.write_csv(tmp, &world.generator, &model, &out.targets)?))?;
    let mut lines = vec![format!(
        "{} chains, expression {}",
        out.batch.latent.rows(),
        out.batch.expr.as_deref().unwrap_or("")
    )];
    match &out.acc {
        Some(acc) => lines.push(format!(
            "ACC {:.4} ({})",
            acc.aggregate,
            fmt_acc(&world.spec, &acc.per_attribute)
        )),
        None => lines.push(format!("satisfaction {:.4}", out.satisfaction)),
    }
    match out.acceptance_rate {
        Some(rate) => lines.push(format!("rejection oracle, acceptance rate {rate:.4}")),
        None => lines.push(format!("mean NFE {:.2}", out.batch.mean_nfe())),
    }
    if let Some(tv) = out.tv {
        lines.push(format!("TV to grid oracle {tv:.4}"));
    }
    finish(
        "sample",
        cfg,
        started,
        CommandOutput {
            lines,
            files: vec![path],
        },
    )
}

pub fn cmd_edit(cfg: &RunConfig) -> Result<CommandOutput> {
    let started = Instant::now();
    let (world, model) = protocol::load(cfg)?;
    prepare(&cfg.output_dir)?;
    let out = protocol::edit_run(cfg, &world, &model)?;
    let spec = &world.spec;
    let mut files = Vec::new();
    let mut lines = Vec::new();
    let mut rows = Vec::new();
    for (i, stage) in out.stages.iter().enumerate() {
        let path = cfg.output_dir.join(format!("edit_stage_{i}.csv"));
        atomic(&path, |tmp| {
            Ok(stage
                .batch
                .write_csv(tmp, &world.generator, &model, std::slice::from_ref(&stage.code))?)
        })?;
        files.push(path);
        let name = &spec.get(stage.attr).name;
        lines.push(format!(
            "edit {i}: {name} = {}  DES {:.4}  id_drift {:.4}  ACC {:.4}",
            stage.target, stage.des, stage.id_drift, stage.acc.aggregate
        ));
        let mut row = vec![
            i.to_string(),
            name.clone(),
            stage.target.to_string(),
            stage.des.to_string(),
            stage.id_drift.to_string(),
            stage.acc.aggregate.to_string(),
            stage.batch.mean_nfe().to_string(),
        ];
        row.extend(stage.acc_before.iter().map(f64::to_string));
        row.extend(stage.acc_after.iter().map(f64::to_string));
        rows.push(row);
    }
    let mut header: Vec<String> = ["stage", "attribute", "target", "des", "id_drift", "acc", "mean_nfe"]
        .map(String::from)
        .to_vec();
    header.extend(spec.iter().map(|a| format!("acc_before_{}", a.name)));
    header.extend(spec.iter().map(|a| format!("acc_after_{}", a.name)));
    let table = cfg.output_dir.join("edits.csv");
    write_csv(&table, &header, &rows)?;
    let report = cfg.output_dir.join("edit_report.json");
    write_text(&report, &out.report.to_json()?)?;
    files.extend([table, report]);
    lines.push(format!("aggregate DES {:.4}", out.report.des.unwrap_or(f64::NAN)));
    finish("edit", cfg, started, CommandOutput { lines, files })
}

/// Reads latents and targets back from a samples CSV.
fn read_samples(path: &Path, spec: &AttributeSpec, latent_dim: usize) -> Result<(RealArray, Vec<AttributeCode>)> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::config(format!("{}: missing column {name}", path.display())))
    };
    let z_cols = (0..latent_dim).map(|k| column(&format!("z_{k}"))).collect::<Result<Vec<_>>>()?;
    let t_cols = spec
        .iter()
        .map(|a| column(&format!("target_{}", a.name)))
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::new();
    let mut codes = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let bad = |what: &str| CliError::config(format!("{}: row {}: bad {what}", path.display(), r + 1));
        for &c in &z_cols {
            data.push(record[c].parse::<f64>().map_err(|_| bad("latent value"))?);
        }
        let mut code = AttributeCode::empty(spec.len());
        for (a, (&c, attr)) in t_cols.iter().zip(spec.iter()).enumerate() {
            let text = &record[c];
            if text.is_empty() {
                continue;
            }
            let v = match attr.kind {
                AttributeKind::Discrete { .. } => AttrValue::Category(text.parse().map_err(|_| bad("target"))?),
                AttributeKind::Continuous => AttrValue::Level(text.parse().map_err(|_| bad("target"))?),
            };
            attr.check_value(v)?;
            code.set(a, Some(v));
        }
        codes.push(code);
    }
    if codes.is_empty() {
        return Err(CliError::config(format!("{} holds no samples", path.display())));
    }
    Ok((RealArray::new(vec![codes.len(), latent_dim], data)?, codes))
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<CommandOutput> {
    let started = Instant::now();
    let world = cfg.world.build()?;
    let input = cfg
        .experiment
        .samples
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("samples.csv"));
    let (latent, codes) = read_samples(&input, &world.spec, world.latent_dim())?;
    prepare(&cfg.output_dir)?;
    let labels = world.truth.label_latents(&world.generator, &latent);
    let acc = acc_from_labels(&labels, &codes)?;
    let report = EvalReport::from_acc(&world.spec, &acc, cfg.to_json_value());
    let json = cfg.output_dir.join("eval_report.json");
    write_text(&json, &report.to_json()?)?;
    let table = cfg.output_dir.join("eval.csv");
    write_csv(&table, &report.csv_header(), &[report.csv_row()])?;
    let lines = vec![
        format!("scored {} samples from {}", acc.samples, input.display()),
        format!("ACC {:.4} ({})", acc.aggregate, fmt_acc(&world.spec, &acc.per_attribute)),
    ];
    finish(
        "eval",
        cfg,
        started,
        CommandOutput {
            lines,
            files: vec![json, table],
        },
    )
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<CommandOutput> {
    let started = Instant::now();
    let (world, model) = protocol::load(cfg)?;
    prepare(&cfg.output_dir)?;
    let path = cfg.output_dir.join("sweep.csv");
    let mut writer = csv::Writer::from_path(&path)?;
    writer.write_record(protocol::SweepRow::HEADER)?;
    writer.flush().map_err(|e| CliError::io(&path, e))?;
    let rows = protocol::sweep_run(cfg, &world, &model, |row| {
        writer.write_record(row.record())?;
        writer.flush().map_err(|e| CliError::io(&path, e))
    })?;
    drop(writer);
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    let mut lines = vec![format!("{} rows, {failed} failed", rows.len())];
    for kind in [crate::config::SamplerName::Ode, crate::config::SamplerName::Ld] {
        let ok: Vec<_> = rows.iter().filter(|r| r.sampler == kind && r.acc.is_some()).collect();
        if let Some(best) = ok.iter().max_by(|a, b| a.acc.partial_cmp(&b.acc).expect("finite ACC")) {
            lines.push(format!(
                "{kind:?}: best ACC {:.4} at row {} (mean NFE {:.1})",
                best.acc.unwrap_or_default(),
                best.index,
                best.mean_nfe.unwrap_or_default()
            ));
        }
    }
    finish(
        "sweep",
        cfg,
        started,
        CommandOutput {
            lines,
            files: vec![path],
        },
    )
}

pub fn cmd_oracle(cfg: &RunConfig) -> Result<CommandOutput> {
    let started = Instant::now();
    let (world, model) = protocol::load(cfg)?;
    prepare(&cfg.output_dir)?;
    let (expr, outcome) = protocol::oracle_run(cfg, &world, &model)?;
    let mut lines = vec![format!("expression {}", expr.display(&world.spec))];
    let files = match outcome {
        OracleOutcome::Grid(density) => {
            let path = cfg.output_dir.join("density.csv");
            atomic(&path, |tmp| Ok(density.write_csv(tmp)?))?;
            let (i, j) = density.argmax();
            let g = density.grid;
            lines.push(format!(
                "grid {}^2 on [{}, {}]^2, mode at ({:.3}, {:.3})",
                g.resolution,
                g.lo,
                g.hi,
                g.center(i),
                g.center(j)
            ));
            vec![path]
        }
        OracleOutcome::Rejection(draws) => {
            let path = cfg.output_dir.join("oracle_samples.csv");
            let d = draws.samples.cols();
            let mut header = vec!["sample_id".to_string()];
            header.extend((0..d).map(|k| format!("z_{k}")));
            let rows: Vec<Vec<String>> = draws
                .samples
                .row_iter()
                .enumerate()
                .map(|(i, z)| std::iter::once(i.to_string()).chain(z.iter().map(f64::to_string)).collect())
                .collect();
            write_csv(&path, &header, &rows)?;
            lines.push(format!(
                "{} exact draws from {} proposals, acceptance rate {:.4}",
                draws.samples.rows(),
                draws.proposals,
                draws.acceptance_rate
            ));
            vec![path]
        }
    };
    finish("oracle", cfg, started, CommandOutput { lines, files })
}
