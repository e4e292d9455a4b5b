//! Command implementations behind the `ilvr` binary. Each command reads a
//! resolved [`RunConfig`], writes its artifacts plus a `config.txt` echo into
//! an output directory, and returns a small report for printing.

pub mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ilvr_core::heatmap::{export_heatmaps, Heatmap};
use ilvr_core::model::Model;
use ilvr_core::tasks::{self, load_dataset, save_dataset, verify_count, verify_gridnav, Family, Trajectory};
use ilvr_core::train::{self, gradient_check, random_guess_floor, run_training, EvalReport, GradCheckOutcome};
use ilvr_core::IlvrError;
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config keys or values.
    #[error("usage: {0}")]
    Usage(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("gradient check failed: max relative error {max_rel_error:.3e} > {tolerance:.1e} (worst: {worst})")]
    GradCheckFailed {
        max_rel_error: f64,
        tolerance: f64,
        worst: String,
    },
    #[error(transparent)]
    Core(#[from] IlvrError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for usage problems (including absent inputs), 1 for compute failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::MissingInput(_) => 2,
            _ => 1,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            other => other.to_string(),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn write_echo(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_file(&dir.join("config.txt"), &cfg.echo())
}

pub fn split_path(data_dir: &Path, split: &str) -> PathBuf {
    data_dir.join(format!("{split}.jsonl"))
}

fn read_split(data_dir: &Path, split: &str) -> Result<Vec<Trajectory>> {
    let p = split_path(data_dir, split);
    if !p.is_file() {
        return Err(CliError::MissingInput(format!(
            "dataset file {} not found (run gen-data first)",
            p.display()
        )));
    }
    Ok(load_dataset(&p)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenReport {
    pub train: usize,
    pub test: usize,
    pub dir: PathBuf,
}

/// Generates, audits and writes `train.jsonl` / `test.jsonl` plus the config echo.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<GenReport> {
    let data = tasks::generate(&cfg.data)?;
    for t in &data {
        let check = match t.family {
            Family::Gridnav => verify_gridnav(t),
            Family::Count => verify_count(t),
        };
        check.map_err(|e| IlvrError::Data(format!("generated trajectory {} failed its audit: {e}", t.seed)))?;
    }
    let (train, test) = cfg.data.split(data);
    let dir = &cfg.data_dir;
    create_dir(dir)?;
    save_dataset(&split_path(dir, "train"), &train)?;
    save_dataset(&split_path(dir, "test"), &test)?;
    write_echo(dir, cfg)?;
    Ok(GenReport {
        train: train.len(),
        test: test.len(),
        dir: dir.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub out: PathBuf,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub eval: Option<EvalReport>,
}

/// Two-stage training. The metrics log is written incrementally, and a
/// failure appends an `error` record before returning.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    let train = read_split(&cfg.data_dir, "train")?;
    let test_path = split_path(&cfg.data_dir, "test");
    let test = if test_path.is_file() {
        load_dataset(&test_path)?
    } else {
        Vec::new()
    };
    let out = &cfg.out;
    create_dir(out)?;
    write_echo(out, cfg)?;
    let metrics = out.join("metrics.jsonl");
    let mut log = BufWriter::new(File::create(&metrics).map_err(io_err(&metrics))?);
    let outcome = match run_training(&cfg.model, &cfg.train, &train, &test, &mut log) {
        Ok(o) => o,
        Err(e) => {
            let rec = serde_json::json!({"kind": "error", "message": e.to_string()});
            writeln!(log, "{rec}").and_then(|_| log.flush()).map_err(io_err(&metrics))?;
            return Err(e.into());
        }
    };
    log.flush().map_err(io_err(&metrics))?;
    let checkpoint = out.join("model.ckpt");
    outcome.model.save(&checkpoint)?;
    ilvr_core::model::save_checkpoint(&out.join("teacher.ckpt"), &cfg.model, &outcome.teacher.params)?;
    Ok(TrainReport {
        out: out.clone(),
        metrics,
        checkpoint,
        steps: outcome.steps,
        eval: outcome.eval,
    })
}

/// One training run per value of `key`, each in `out/<key>=<value>/`.
pub fn cmd_sweep(cfg: &RunConfig, key: &str, values: &[String]) -> Result<Vec<(String, TrainReport)>> {
    if values.is_empty() {
        return Err(CliError::Usage(format!("sweep over `{key}` lists no values")));
    }
    // resolve every configuration before training any of them
    let runs = values
        .iter()
        .map(|v| {
            let mut c = cfg.clone();
            c.set(key, v)?;
            c.out = cfg.out.join(format!("{key}={v}"));
            c.validate()?;
            Ok((v.clone(), c))
        })
        .collect::<Result<Vec<_>>>()?;
    runs.into_iter()
        .map(|(v, c)| Ok((v, cmd_train(&c)?)))
        .collect()
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join("model.ckpt"))
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    let p = checkpoint_path(cfg);
    if !p.is_file() {
        return Err(CliError::MissingInput(format!("checkpoint {} not found", p.display())));
    }
    Ok(Model::load(&p, None)?)
}

/// Greedy-decodes the chosen split and writes `eval.json`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let model = load_model(cfg)?;
    let data = read_split(&cfg.data_dir, &cfg.split)?;
    let report = train::evaluate(&model, &data, cfg.train.max_decode_tokens)?;
    create_dir(&cfg.out)?;
    write_echo(&cfg.out, cfg)?;
    let rec = serde_json::json!({
        "split": cfg.split,
        "accuracy": report.accuracy,
        "correct": report.correct,
        "total": report.total,
        "malformed": report.malformed,
        "per_family": report.family_accuracy(),
        "random_guess_floor": random_guess_floor(&data),
    });
    write_file(&cfg.out.join("eval.json"), &format!("{rec}\n"))?;
    Ok(report)
}

/// Finite-difference audit of both losses; fails above the tolerance.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradCheckOutcome> {
    let mut gc = cfg.gradcheck.clone();
    gc.lambda_sim = cfg.train.lambda_sim;
    let outcome = gradient_check(&gc)?;
    create_dir(&cfg.out)?;
    write_echo(&cfg.out, cfg)?;
    let mut s = String::new();
    for c in &outcome.checks {
        let rec = serde_json::json!({
            "loss": c.loss,
            "max_rel_error": c.max_rel_error,
            "worst_param": c.worst_param,
            "worst_index": c.worst_index,
            "analytic": c.analytic,
            "numeric": c.numeric,
            "coords": c.coords,
            "skipped_params": c.skipped_params,
        });
        s.push_str(&format!("{rec}\n"));
    }
    write_file(&cfg.out.join("gradcheck.jsonl"), &s)?;
    if !outcome.passed() {
        let worst = outcome
            .worst()
            .map(|w| format!("{} in {}[{}]", w.loss, w.worst_param, w.worst_index))
            .unwrap_or_default();
        return Err(CliError::GradCheckFailed {
            max_rel_error: outcome.max_rel_error(),
            tolerance: outcome.tolerance,
            worst,
        });
    }
    Ok(outcome)
}

/// Writes one grid file per latent segment plus `heatmaps.jsonl`.
pub fn cmd_export_heatmap(cfg: &RunConfig) -> Result<Vec<(usize, Heatmap)>> {
    let model = load_model(cfg)?;
    let data = read_split(&cfg.data_dir, &cfg.split)?;
    let dir = cfg.out.join("heatmaps");
    create_dir(&dir)?;
    write_echo(&cfg.out, cfg)?;
    let mut all = Vec::new();
    let mut jsonl = String::new();
    for &i in &cfg.trajectories {
        let t = data.get(i).ok_or_else(|| {
            CliError::Usage(format!("trajectory index {i} outside {} split of {}", cfg.split, data.len()))
        })?;
        for h in export_heatmaps(&model, t, cfg.train.structure, cfg.train.targets.group_size)? {
            let mut grid = String::new();
            for r in 0..h.rows {
                let row: Vec<String> = h.values[r * h.cols..(r + 1) * h.cols].iter().map(|v| v.to_string()).collect();
                grid.push_str(&row.join(" "));
                grid.push('\n');
            }
            write_file(&dir.join(format!("traj{i}_seg{}.txt", h.segment)), &grid)?;
            let rec = serde_json::json!({"trajectory": i, "segment": h.segment, "rows": h.rows, "cols": h.cols, "values": h.values});
            jsonl.push_str(&format!("{rec}\n"));
            all.push((i, h));
        }
    }
    write_file(&cfg.out.join("heatmaps.jsonl"), &jsonl)?;
    Ok(all)
}
