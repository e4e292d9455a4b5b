//! `key = value` run configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ilvr_core::interleave::Structure;
use ilvr_core::model::ModelConfig;
use ilvr_core::tasks::{DatasetSpec, Family};
use ilvr_core::teacher::{IntentScope, Mechanism};
use ilvr_core::train::{EmaSchedule, GradCheckConfig, LrSpan, TrainConfig};

use crate::CliError;

/// Every knob of a run. One `seed` drives data, initialization and shuffling.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gradcheck: GradCheckConfig,
    /// Dataset directory holding `train.jsonl` and `test.jsonl`.
    pub data_dir: PathBuf,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Which split `eval` and `export-heatmap` read.
    pub split: String,
    /// Trajectory indices for `export-heatmap`.
    pub trajectories: Vec<usize>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            data: DatasetSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            gradcheck: GradCheckConfig::default(),
            data_dir: PathBuf::from("data"),
            out: PathBuf::from("runs/default"),
            checkpoint: None,
            split: "test".into(),
            trajectories: vec![0],
            seed: 42,
        };
        c.apply_seed();
        c
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| CliError::Usage(format!("bad value `{value}` for `{key}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Usage(format!("bad value `{value}` for `{key}`: expected true or false"))),
    }
}

fn scope_name(s: IntentScope) -> &'static str {
    match s {
        IntentScope::Question => "question",
        IntentScope::PerStep => "per_step",
    }
}

fn ema_name(s: EmaSchedule) -> &'static str {
    match s {
        EmaSchedule::PerStep => "per_step",
        EmaSchedule::PerEpoch => "per_epoch",
    }
}

fn span_name(s: LrSpan) -> &'static str {
    match s {
        LrSpan::Run => "run",
        LrSpan::PerStage => "per_stage",
    }
}

impl RunConfig {
    /// Keys in echo order.
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "data",
        "out",
        "checkpoint",
        "split",
        "trajectories",
        "family",
        "size",
        "width",
        "height",
        "hazards",
        "max_objects",
        "max_steps",
        "train_fraction",
        "hidden_dim",
        "n_layers",
        "n_heads",
        "ffn_dim",
        "max_seq_len",
        "latent_k",
        "stage1_epochs",
        "stage2_epochs",
        "lambda_sim",
        "tau",
        "group_size",
        "lr",
        "weight_decay",
        "beta1",
        "beta2",
        "adam_eps",
        "structure",
        "mechanism",
        "intent_scope",
        "attention_layer",
        "ema_schedule",
        "lr_span",
        "detach_feedback",
        "grad_accum",
        "eval_every",
        "max_decode_tokens",
        "log_steps",
        "gradcheck_coords",
        "gradcheck_eps",
        "gradcheck_tolerance",
    ];

    fn apply_seed(&mut self) {
        self.data.seed = self.seed;
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.gradcheck.seed = self.seed;
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        match key.trim() {
            "seed" => {
                self.seed = parse(key, v)?;
                self.apply_seed();
            }
            "data" => self.data_dir = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "checkpoint" => self.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "split" => match v {
                "train" | "test" => self.split = v.into(),
                _ => return Err(CliError::Usage(format!("split must be train or test, got `{v}`"))),
            },
            "trajectories" => {
                self.trajectories = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_, _>>()?;
            }
            "family" => self.data.family = parse::<Family>(key, v)?,
            "size" => self.data.size = parse(key, v)?,
            "width" => self.data.width = parse(key, v)?,
            "height" => self.data.height = parse(key, v)?,
            "hazards" => self.data.hazards = parse(key, v)?,
            "max_objects" => self.data.max_objects = parse(key, v)?,
            "max_steps" => self.data.max_steps = parse(key, v)?,
            "train_fraction" => self.data.train_fraction = parse(key, v)?,
            "hidden_dim" => self.model.hidden_dim = parse(key, v)?,
            "n_layers" => self.model.n_layers = parse(key, v)?,
            "n_heads" => self.model.n_heads = parse(key, v)?,
            "ffn_dim" => self.model.ffn_dim = parse(key, v)?,
            "max_seq_len" => self.model.max_seq_len = parse(key, v)?,
            "latent_k" => {
                let k = parse(key, v)?;
                self.model.latent_k = k;
                self.train.targets.k = k;
            }
            "stage1_epochs" => self.train.stage1_epochs = parse(key, v)?,
            "stage2_epochs" => self.train.stage2_epochs = parse(key, v)?,
            "lambda_sim" => self.train.lambda_sim = parse(key, v)?,
            "tau" => self.train.tau = parse(key, v)?,
            "group_size" => self.train.targets.group_size = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "weight_decay" => self.train.weight_decay = parse(key, v)?,
            "beta1" => self.train.beta1 = parse(key, v)?,
            "beta2" => self.train.beta2 = parse(key, v)?,
            "adam_eps" => self.train.adam_eps = parse(key, v)?,
            "structure" => self.train.structure = parse::<Structure>(key, v)?,
            "mechanism" => self.train.targets.mechanism = parse::<Mechanism>(key, v)?,
            "intent_scope" => {
                self.train.targets.intent_scope = match v {
                    "question" => IntentScope::Question,
                    "per_step" => IntentScope::PerStep,
                    _ => return Err(CliError::Usage(format!("intent_scope must be question or per_step, got `{v}`"))),
                }
            }
            "attention_layer" => {
                self.train.targets.attention_layer = match v {
                    "last" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "ema_schedule" => {
                self.train.ema = match v {
                    "per_step" => EmaSchedule::PerStep,
                    "per_epoch" => EmaSchedule::PerEpoch,
                    _ => return Err(CliError::Usage(format!("ema_schedule must be per_step or per_epoch, got `{v}`"))),
                }
            }
            "lr_span" => {
                self.train.lr_span = match v {
                    "run" => LrSpan::Run,
                    "per_stage" => LrSpan::PerStage,
                    _ => return Err(CliError::Usage(format!("lr_span must be run or per_stage, got `{v}`"))),
                }
            }
            "detach_feedback" => self.train.detach_feedback = parse_bool(key, v)?,
            "grad_accum" => self.train.grad_accum = parse(key, v)?,
            "eval_every" => self.train.eval_every = parse(key, v)?,
            "max_decode_tokens" => self.train.max_decode_tokens = parse(key, v)?,
            "log_steps" => self.train.log_steps = parse_bool(key, v)?,
            "gradcheck_coords" => self.gradcheck.coords_per_param = parse(key, v)?,
            "gradcheck_eps" => self.gradcheck.eps = parse(key, v)?,
            "gradcheck_tolerance" => self.gradcheck.tolerance = parse(key, v)?,
            other => return Err(CliError::Usage(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        Some(match key {
            "seed" => self.seed.to_string(),
            "data" => self.data_dir.display().to_string(),
            "out" => self.out.display().to_string(),
            "checkpoint" => self.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "split" => self.split.clone(),
            "trajectories" => self.trajectories.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
            "family" => d.family.to_string(),
            "size" => d.size.to_string(),
            "width" => d.width.to_string(),
            "height" => d.height.to_string(),
            "hazards" => d.hazards.to_string(),
            "max_objects" => d.max_objects.to_string(),
            "max_steps" => d.max_steps.to_string(),
            "train_fraction" => d.train_fraction.to_string(),
            "hidden_dim" => m.hidden_dim.to_string(),
            "n_layers" => m.n_layers.to_string(),
            "n_heads" => m.n_heads.to_string(),
            "ffn_dim" => m.ffn_dim.to_string(),
            "max_seq_len" => m.max_seq_len.to_string(),
            "latent_k" => m.latent_k.to_string(),
            "stage1_epochs" => t.stage1_epochs.to_string(),
            "stage2_epochs" => t.stage2_epochs.to_string(),
            "lambda_sim" => t.lambda_sim.to_string(),
            "tau" => t.tau.to_string(),
            "group_size" => t.targets.group_size.to_string(),
            "lr" => t.lr.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "adam_eps" => t.adam_eps.to_string(),
            "structure" => t.structure.to_string(),
            "mechanism" => t.targets.mechanism.to_string(),
            "intent_scope" => scope_name(t.targets.intent_scope).into(),
            "attention_layer" => t.targets.attention_layer.map_or("last".into(), |l| l.to_string()),
            "ema_schedule" => ema_name(t.ema).into(),
            "lr_span" => span_name(t.lr_span).into(),
            "detach_feedback" => t.detach_feedback.to_string(),
            "grad_accum" => t.grad_accum.to_string(),
            "eval_every" => t.eval_every.to_string(),
            "max_decode_tokens" => t.max_decode_tokens.to_string(),
            "log_steps" => t.log_steps.to_string(),
            "gradcheck_coords" => self.gradcheck.coords_per_param.to_string(),
            "gradcheck_eps" => self.gradcheck.eps.to_string(),
            "gradcheck_tolerance" => self.gradcheck.tolerance.to_string(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| CliError::Usage(format!("config line {}: {}", n + 1, e.message())))?;
        }
        Ok(())
    }

    /// Applies a single `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), CliError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{kv}` is not key=value")))?;
        self.set(k, v)
    }

    /// Defaults, then the file (if any), then overrides in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut c = Self::default();
        if let Some(p) = file {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            c.apply_text(&text)?;
        }
        for o in overrides {
            c.apply_override(o)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: ilvr_core::IlvrError| CliError::Usage(e.to_string());
        self.data.validate().map_err(usage)?;
        self.model.validate().map_err(usage)?;
        self.train.validate(&self.model).map_err(usage)?;
        if self.trajectories.is_empty() {
            return Err(CliError::Usage("trajectories must list at least one index".into()));
        }
        if !(self.gradcheck.eps > 0.0 && self.gradcheck.tolerance > 0.0) || self.gradcheck.coords_per_param == 0 {
            return Err(CliError::Usage("gradcheck eps, tolerance and coords must be positive".into()));
        }
        Ok(())
    }

    /// Fully resolved configuration, one `key = value` per line.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            s.push_str(&format!("{k} = {}\n", self.get(k).expect("every listed key resolves")));
        }
        s
    }
}
