//! Experiment configuration: a strict TOML tree with dotted `key=value`
//! overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DataSampler, Task};
use crate::error::{Error, Result};
use crate::flow::LossOptions;
use crate::net::NetConfig;
use crate::sample_eval::{EvalConfig, TasConfig};
use crate::schedules::ScheduleConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: Task,
    pub seed: u64,
    /// Run directory; relative paths are resolved against the output root.
    pub out_dir: Option<PathBuf>,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub loss: LossOptions,
    pub eval: EvalConfig,
    pub tas: TasConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "gauss8".into(),
            task: Task::Gauss8,
            seed: 0,
            out_dir: None,
            net: NetConfig::default(),
            train: TrainConfig::default(),
            schedule: ScheduleConfig::default(),
            loss: LossOptions::default(),
            eval: EvalConfig::default(),
            tas: TasConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name must be non-empty and contain no path separators"));
        }
        self.net.validate()?;
        self.train.validate()?;
        self.schedule.validate()?;
        self.eval.validate()?;
        if !(self.loss.adp_c > 0.0) || !(self.loss.adp_p >= 0.0) {
            return Err(Error::config("loss.adp_c must be positive and loss.adp_p non-negative"));
        }
        if self.net.data_dim != self.task.dim() {
            return Err(Error::config(format!(
                "net.data_dim = {} but task {} is {}-dimensional",
                self.net.data_dim,
                self.task.name(),
                self.task.dim()
            )));
        }
        if self.net.num_labels > 0 && self.net.num_labels != self.task.num_labels() {
            return Err(Error::config(format!(
                "net.num_labels = {} but task {} has {} classes",
                self.net.num_labels,
                self.task.name(),
                self.task.num_labels()
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text`, applies each `key=value` override in order, then
    /// validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut tree: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_with_overrides(&text, overrides)
            .map_err(|e| match e {
                Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
                other => other,
            })
    }

    /// The resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes to TOML")
    }

    /// Hash of everything that affects training numerics; the name and output
    /// directory are excluded.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.name = String::new();
        c.out_dir = None;
        let json = serde_json::to_string(&c).expect("experiment config serializes to JSON");
        let hash = Sha256::digest(json.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Output directory: the configured path, resolved against `root` when
    /// relative, or `root/<name>` when unset.
    pub fn run_dir(&self, root: &Path) -> PathBuf {
        match &self.out_dir {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => root.join(p),
            None => root.join(&self.name),
        }
    }
}

/// Applies one `dotted.key=value` override to a TOML tree. The value is read
/// as a TOML literal, falling back to a bare string.
pub fn apply_override(tree: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key `{key}` has an empty segment")));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, path) = parts.split_last().expect("at least one segment");
    let mut node = tree;
    for p in path {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::config(format!("override `{key}`: `{p}` is not a table"))),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}

const REFERENCE: &[(&str, &str)] = &[
    ("name", "experiment name; also the default run directory name"),
    ("task", "two-moons | gauss8 | checkerboard | spiral | single-datum"),
    ("seed", "seed for initialization, batches and noise"),
    ("out_dir", "run directory (unset: <output root>/<name>)"),
    ("net.data_dim", "data dimensionality D"),
    ("net.hidden", "hidden layer widths"),
    ("net.time_embed_dim", "sinusoidal embedding width per time input"),
    ("net.max_freq", "largest embedding frequency"),
    ("net.num_labels", "class count for conditional models, 0 for unconditional"),
    ("net.label_embed_dim", "label embedding width"),
    ("train.T", "total iterations; stage budgets must sum to it"),
    ("train.batch", "minibatch size"),
    ("train.lr", "Adam learning rate"),
    ("train.lr_schedule", "constant | cosine decay to 0 over T"),
    ("train.adam_beta1", "Adam first-moment decay"),
    ("train.adam_beta2", "Adam second-moment decay"),
    ("train.adam_eps", "Adam denominator epsilon"),
    ("train.clip_norm", "global gradient-norm clip, 0 disables"),
    ("train.log_every", "loss row cadence in iterations"),
    ("train.eval_every", "W2 evaluation cadence, 0 = final only"),
    ("train.checkpoint_every", "extra checkpoint cadence, 0 = stage ends only"),
    ("train.stages", "list of {name, iters, fm_ratio?, dt_range?, k_noise, progressive?, sampler?, alpha?}; empty = one joint stage"),
    ("schedule.fm_ratio", "fraction of rows with r = t"),
    ("schedule.progressive", "enable the progressive gap weight beta"),
    ("schedule.k_sched", "progress exponent k in s = 1 - (i/T)^k"),
    ("schedule.alpha", "unit | clamped-snr weight on flow-matching rows"),
    ("schedule.snr_gamma", "SNR clamp for clamped-snr"),
    ("schedule.sampler", "base | adaptive time sampler"),
    ("schedule.logit_mean", "logit-normal mean of the base sampler"),
    ("schedule.logit_std", "logit-normal std of the base sampler"),
    ("schedule.dt_range", "optional [lo, hi] gap restriction"),
    ("schedule.adaptive_bins", "adaptive sampler bins over [0, 1]"),
    ("schedule.adaptive_decay", "loss EMA decay per update"),
    ("schedule.adaptive_floor", "mass share spread uniformly over bins"),
    ("schedule.lambda_samples", "Monte-Carlo draws for lambda"),
    ("loss.adp_c", "adaptive weight offset c"),
    ("loss.adp_p", "adaptive weight power p"),
    ("loss.adaptive", "false forces every adaptive weight to 1"),
    ("eval.samples", "points per W2 evaluation (at most 4096)"),
    ("eval.seed", "fixed evaluation seed"),
    ("tas.n_points", "data points per affinity measurement"),
    ("tas.batches", "gradient batches the points are split into"),
    ("tas.intervals", "gap intervals of the u-loss"),
];

/// Every configuration key with its default and a one-line description.
pub fn config_reference() -> String {
    let defaults = toml::Value::try_from(ExperimentConfig::default()).expect("defaults serialize");
    let mut out = String::from("# Configuration reference (TOML). Unknown keys are rejected.\n");
    let mut section = "";
    for (key, help) in REFERENCE {
        let (sec, leaf) = key.rsplit_once('.').unwrap_or(("", key));
        if sec != section {
            out.push_str(&format!("\n[{sec}]\n"));
            section = sec;
        }
        let mut node = Some(&defaults);
        for p in key.split('.') {
            node = node.and_then(|n| n.get(p));
        }
        match node {
            Some(v) => out.push_str(&format!("{leaf} = {v}  # {help}\n")),
            None => out.push_str(&format!("# {leaf} = (unset)  # {help}\n")),
        }
    }
    out
}
