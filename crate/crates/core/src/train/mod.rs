//! The optimization loop, staged protocols and sweeps.

mod adam;
mod sweep;

pub use adam::{adam_step, clip_global_norm, global_norm, AdamParams, AdamState};
pub use sweep::{
    cell_config, final_eval, finished_run, run_cell, run_parallel, run_stage_sweep, train_net, SweepAxis, SweepCell,
    SweepTable, SweepValue, EPOCH_ITERS,
};

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::DataSampler;
use crate::error::{Error, Result};
use crate::flow::{make_batch, meanflow_loss_grad, LossBreakdown};
use crate::metrics::{MetricsRecord, MetricsWriter, METRICS_SCHEMA_VERSION};
use crate::net::{Checkpoint, VelocityNet};
use crate::sample_eval::eval_suite;
use crate::schedules::{AlphaKind, SamplerKind, ScheduleConfig, ScheduleState};

/// One segment of a run with its own `(t, r)` sampling and target options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub iters: u64,
    /// Overrides `schedule.fm_ratio`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fm_ratio: Option<f64>,
    /// Overrides `schedule.dt_range`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_range: Option<[f64; 2]>,
    /// Noise scale on the flow-matching targets.
    #[serde(default)]
    pub k_noise: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progressive: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<AlphaKind>,
}

impl StageConfig {
    pub fn joint(iters: u64) -> Self {
        StageConfig {
            name: "joint".into(),
            iters,
            fm_ratio: None,
            dt_range: None,
            k_noise: 0.0,
            progressive: None,
            sampler: None,
            alpha: None,
        }
    }

    /// Flow-matching loss only (`r = t` on every row).
    pub fn v_pretrain(iters: u64) -> Self {
        StageConfig {
            name: "v-pretrain".into(),
            fm_ratio: Some(1.0),
            ..Self::joint(iters)
        }
    }

    /// Average-velocity loss only (no `r = t` rows), optionally gap-restricted.
    pub fn u_finetune(iters: u64, dt_range: Option<[f64; 2]>) -> Self {
        StageConfig {
            name: "u-finetune".into(),
            fm_ratio: Some(0.0),
            dt_range,
            ..Self::joint(iters)
        }
    }

    pub fn schedule(&self, base: &ScheduleConfig) -> ScheduleConfig {
        let mut s = base.clone();
        if let Some(f) = self.fm_ratio {
            s.fm_ratio = f;
        }
        if self.dt_range.is_some() {
            s.dt_range = self.dt_range;
        }
        if let Some(p) = self.progressive {
            s.progressive = p;
        }
        if let Some(k) = self.sampler {
            s.sampler = k;
        }
        if let Some(a) = self.alpha {
            s.alpha = a;
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` to 0 over `T`.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    #[serde(rename = "T")]
    pub total: u64,
    pub batch: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub log_every: u64,
    /// W₂ evaluation cadence; 0 evaluates only at the end.
    pub eval_every: u64,
    /// Extra checkpoint cadence; 0 saves only at stage ends.
    pub checkpoint_every: u64,
    /// Empty means one joint stage spanning `T`.
    pub stages: Vec<StageConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total: 30_000,
            batch: 512,
            lr: 3e-4,
            lr_schedule: LrSchedule::Constant,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            log_every: 100,
            eval_every: 5_000,
            checkpoint_every: 0,
            stages: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("train.batch must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("train.adam_beta1 and train.adam_beta2 must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps must be positive"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::config("train.clip_norm must be non-negative"));
        }
        if self.log_every == 0 {
            return Err(Error::config("train.log_every must be positive"));
        }
        if !self.stages.is_empty() {
            let sum: u64 = self.stages.iter().map(|s| s.iters).sum();
            if sum != self.total {
                return Err(Error::config(format!(
                    "stage budgets sum to {sum} but train.T = {}",
                    self.total
                )));
            }
            for s in &self.stages {
                if s.name.is_empty() || s.name.contains(['/', '\\']) {
                    return Err(Error::config("stage names must be non-empty without path separators"));
                }
                if !(s.k_noise >= 0.0 && s.k_noise.is_finite()) {
                    return Err(Error::config(format!("stage {}: k_noise must be >= 0", s.name)));
                }
            }
        }
        Ok(())
    }

    /// The stage list with the empty-list default expanded.
    pub fn resolved_stages(&self) -> Vec<StageConfig> {
        if self.stages.is_empty() {
            vec![StageConfig::joint(self.total)]
        } else {
            self.stages.clone()
        }
    }

    /// Learning rate of the step that starts at iteration `i`.
    pub fn lr_at(&self, i: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = if self.total == 0 { 0.0 } else { i.min(self.total) as f64 / self.total as f64 };
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// What happened in one optimizer step.
#[derive(Clone, Debug)]
pub struct StepLog {
    /// Completed iterations after this step.
    pub iteration: u64,
    pub stage: String,
    pub loss: LossBreakdown,
    pub s: f64,
    pub grad_norm: f64,
}

impl StepLog {
    pub fn record(&self) -> MetricsRecord {
        MetricsRecord {
            iter: self.iteration,
            stage: self.stage.clone(),
            loss_total: Some(self.loss.total),
            loss_u: Some(self.loss.u_part),
            loss_v: Some(self.loss.v_part),
            mean_beta: self.loss.mean_beta,
            mean_alpha: self.loss.mean_alpha,
            s: Some(self.s),
            ..Default::default()
        }
    }
}

const INIT_STREAM: u64 = 0;
const BATCH_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Owns the model, optimizer and generators of one run.
pub struct Trainer {
    config: ExperimentConfig,
    digest: String,
    stages: Vec<StageConfig>,
    starts: Vec<u64>,
    schedules: Vec<ScheduleState>,
    stage_idx: usize,
    net: VelocityNet,
    adam: AdamState,
    iteration: u64,
    rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut init = stream(config.seed, INIT_STREAM);
        let net = VelocityNet::init(config.net.clone(), &mut init)?;
        Self::with_net(config, net)
    }

    /// Starts a fresh run from the given weights (e.g. a pretrained model).
    /// Optimizer state and generators start fresh.
    pub fn with_net(config: ExperimentConfig, net: VelocityNet) -> Result<Self> {
        config.validate()?;
        if net.config() != &config.net {
            return Err(Error::config("initial weights do not match net config"));
        }
        let stages = config.train.resolved_stages();
        let mut starts = Vec::with_capacity(stages.len());
        let mut acc = 0;
        for s in &stages {
            starts.push(acc);
            acc += s.iters;
        }
        let schedules = stages
            .iter()
            .map(|s| ScheduleState::new(s.schedule(&config.schedule), config.train.total, config.seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trainer {
            digest: config.digest(),
            adam: AdamState::zeros_like(net.params()),
            rng: stream(config.seed, BATCH_STREAM),
            noise_rng: stream(config.seed, NOISE_STREAM),
            config,
            stages,
            starts,
            schedules,
            stage_idx: 0,
            net,
            iteration: 0,
        })
    }

    /// Continues a run from `ckpt`. A digest mismatch is an error unless
    /// `force`, in which case the warning is returned.
    pub fn resume(config: ExperimentConfig, ckpt: Checkpoint, force: bool) -> Result<(Self, Option<String>)> {
        let mut tr = Self::with_net(config, ckpt.net.clone())?;
        let warning = ckpt.check_digest(&tr.digest, force)?;
        if ckpt.net.config() != &tr.config.net {
            return Err(Error::config("checkpoint net config differs from the experiment's"));
        }
        if ckpt.iteration > tr.config.train.total {
            return Err(Error::config(format!(
                "checkpoint is at iteration {} beyond train.T = {}",
                ckpt.iteration, tr.config.train.total
            )));
        }
        tr.iteration = ckpt.iteration;
        tr.adam = ckpt.optimizer;
        tr.rng = ckpt.rng;
        tr.noise_rng = ckpt.noise_rng;
        // The stored schedule belongs to the stage of the last completed step.
        tr.stage_idx = if tr.iteration == 0 { 0 } else { tr.stage_of(tr.iteration - 1) };
        let mut sched = ckpt.schedule;
        sched.total = tr.config.train.total;
        tr.schedules[tr.stage_idx] = sched;
        Ok((tr, warning))
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn net(&self) -> &VelocityNet {
        &self.net
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.train.total
    }

    pub fn stages(&self) -> &[StageConfig] {
        &self.stages
    }

    /// λ of each stage's sampling configuration.
    pub fn lambdas(&self) -> Vec<f64> {
        self.schedules.iter().map(|s| s.lambda).collect()
    }

    pub fn schedule(&self) -> &ScheduleState {
        &self.schedules[self.stage_idx]
    }

    fn stage_of(&self, iteration: u64) -> usize {
        (0..self.stages.len())
            .rev()
            .find(|&i| self.starts[i] <= iteration && self.stages[i].iters > 0)
            .unwrap_or(0)
    }

    pub fn current_stage(&self) -> &StageConfig {
        &self.stages[self.stage_of(self.iteration.min(self.config.train.total.saturating_sub(1)))]
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: crate::net::CHECKPOINT_FORMAT_VERSION,
            config_digest: self.digest.clone(),
            iteration: self.iteration,
            net: self.net.clone(),
            optimizer: self.adam.clone(),
            rng: self.rng.clone(),
            noise_rng: self.noise_rng.clone(),
            schedule: self.schedules[self.stage_idx].clone(),
        }
    }

    pub fn data(&self) -> &dyn DataSampler {
        &self.config.task
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<StepLog> {
        if self.is_done() {
            return Err(Error::config("run already reached train.T"));
        }
        let i = self.iteration;
        let idx = self.stage_of(i);
        if idx != self.stage_idx {
            let carried = self.schedules[self.stage_idx].adaptive.clone();
            self.schedules[idx].adaptive = carried;
            self.stage_idx = idx;
        }
        let at = |e: Error| match e {
            Error::NumericFault(m) => Error::NumericFault(format!("iteration {i}: {m}")),
            other => other,
        };
        let sched = &mut self.schedules[idx];
        sched.iteration = i;
        let stage = &self.stages[idx];
        let mut batch = make_batch(&self.config.task, &mut self.rng, self.config.train.batch, sched)?;
        if stage.k_noise > 0.0 {
            batch.corrupt_fm_targets(stage.k_noise, &mut self.noise_rng);
        }
        let (loss, mut grads) = meanflow_loss_grad(&self.net, &batch, sched, &self.config.loss).map_err(at)?;
        if sched.config.sampler == SamplerKind::Adaptive {
            let (ts, ls): (Vec<f64>, Vec<f64>) = (0..batch.len())
                .filter(|&r| batch.is_fm[r])
                .map(|r| (batch.t[r], loss.sq_errors[r]))
                .unzip();
            sched.adaptive_sampler_update(&ts, &ls);
        }
        let s = sched.progress();
        let grad_norm = if self.config.train.clip_norm > 0.0 {
            clip_global_norm(&mut grads, self.config.train.clip_norm)
        } else {
            global_norm(&grads)
        };
        if !grad_norm.is_finite() {
            return Err(at(Error::NumericFault(format!("gradient norm is {grad_norm}"))));
        }
        let mut hp = self.config.train.adam();
        hp.lr = self.config.train.lr_at(i);
        adam_step(self.net.params_mut(), &grads, &mut self.adam, &hp)?;
        self.iteration += 1;
        Ok(StepLog {
            iteration: self.iteration,
            stage: stage.name.clone(),
            loss,
            s,
            grad_norm,
        })
    }

    pub fn evaluate(&self) -> Result<MetricsRecord> {
        eval_suite(&self.net, &self.config.task, &self.config.eval)
    }

    fn at_stage_end(&self) -> bool {
        let it = self.iteration;
        self.stages
            .iter()
            .zip(&self.starts)
            .any(|(s, &st)| s.iters > 0 && st + s.iters == it)
    }

    /// Steps until `target` iterations (capped at `T`), reporting rows and
    /// checkpoints to `obs`.
    pub fn run_until(&mut self, target: u64, obs: &mut dyn RunObserver) -> Result<()> {
        let target = target.min(self.config.train.total);
        let tc = self.config.train.clone();
        while self.iteration < target {
            let log = self.step()?;
            let it = log.iteration;
            let last = it == tc.total;
            let want_eval = last || (tc.eval_every > 0 && it % tc.eval_every == 0);
            if want_eval || it % tc.log_every == 0 || self.at_stage_end() {
                let mut rec = log.record();
                if want_eval {
                    rec.merge_eval(&self.evaluate()?);
                }
                obs.record(&rec)?;
            }
            if self.at_stage_end() {
                obs.checkpoint(&self.checkpoint(), Some(&log.stage))?;
            } else if tc.checkpoint_every > 0 && it % tc.checkpoint_every == 0 {
                obs.checkpoint(&self.checkpoint(), None)?;
            }
        }
        Ok(())
    }

    pub fn run(&mut self, obs: &mut dyn RunObserver) -> Result<()> {
        self.run_until(self.config.train.total, obs)
    }
}

/// Receives metrics rows and checkpoints as a run progresses.
pub trait RunObserver {
    fn record(&mut self, rec: &MetricsRecord) -> Result<()>;
    /// `stage` is set when the checkpoint closes that stage.
    fn checkpoint(&mut self, _ckpt: &Checkpoint, _stage: Option<&str>) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for Vec<MetricsRecord> {
    fn record(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Immutable description of a run, written before the first step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub package: String,
    pub metrics_schema: u32,
    pub checkpoint_format: u32,
    pub config_digest: String,
    pub param_count: usize,
    /// λ per stage, in stage order.
    pub lambdas: Vec<StageLambda>,
    pub metrics_file: String,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLambda {
    pub stage: String,
    pub lambda: f64,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

impl RunManifest {
    pub fn for_trainer(tr: &Trainer) -> Self {
        RunManifest {
            package: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).into(),
            metrics_schema: METRICS_SCHEMA_VERSION,
            checkpoint_format: crate::net::CHECKPOINT_FORMAT_VERSION,
            config_digest: tr.digest.clone(),
            param_count: tr.net.param_count(),
            lambdas: tr
                .stages
                .iter()
                .zip(tr.lambdas())
                .map(|(s, l)| StageLambda {
                    stage: s.name.clone(),
                    lambda: l,
                })
                .collect(),
            metrics_file: METRICS_FILE.into(),
            config: tr.config.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::decode(path.display().to_string(), e.to_string()))
    }
}

/// Writes rows to `metrics.csv` and checkpoints under the run directory.
struct RunDirObserver {
    dir: PathBuf,
    writer: MetricsWriter,
    records: Vec<MetricsRecord>,
}

impl RunObserver for RunDirObserver {
    fn record(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.writer.write(rec)?;
        self.records.push(rec.clone());
        Ok(())
    }

    fn checkpoint(&mut self, ckpt: &Checkpoint, stage: Option<&str>) -> Result<()> {
        let dir = self.dir.join(CHECKPOINT_DIR);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let name = match stage {
            Some(s) => format!("{:08}-{s}.json", ckpt.iteration),
            None => format!("{:08}.json", ckpt.iteration),
        };
        ckpt.save(&dir.join(name))
    }
}

/// Result of a run written to disk.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    /// Rows written during this invocation.
    pub records: Vec<MetricsRecord>,
    pub checkpoint: Checkpoint,
}

impl RunSummary {
    /// The last row carrying W₂ values.
    pub fn final_eval(&self) -> Option<&MetricsRecord> {
        self.records.iter().rev().find(|r| r.has_eval())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn prepare_dir(tr: &Trainer, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = RunManifest::for_trainer(tr);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST_FILE), &json)?;
    write_atomic(&dir.join(CONFIG_FILE), tr.config.to_toml().as_bytes())?;
    let metrics = dir.join(METRICS_FILE);
    fs::write(&metrics, b"").map_err(|e| Error::io(&metrics, e))?;
    Ok(())
}

fn drive(mut tr: Trainer, dir: &Path) -> Result<RunSummary> {
    let mut obs = RunDirObserver {
        dir: dir.to_path_buf(),
        writer: MetricsWriter::open(&dir.join(METRICS_FILE))?,
        records: Vec::new(),
    };
    tr.run(&mut obs)?;
    let ckpt = tr.checkpoint();
    ckpt.save(&dir.join(FINAL_CHECKPOINT))?;
    audit_run_dir(dir)?;
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        records: obs.records,
        checkpoint: ckpt,
    })
}

/// Trains `config` from scratch into `dir` (manifest, resolved config,
/// metrics CSV, checkpoints).
pub fn train(config: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    let tr = Trainer::new(config.clone())?;
    prepare_dir(&tr, dir)?;
    drive(tr, dir)
}

/// Trains starting from `net` instead of a fresh initialization.
pub fn train_from(config: &ExperimentConfig, net: VelocityNet, dir: &Path) -> Result<RunSummary> {
    let tr = Trainer::with_net(config.clone(), net)?;
    prepare_dir(&tr, dir)?;
    drive(tr, dir)
}

/// Continues the run in `dir` from `ckpt`, appending to its metrics.
pub fn resume(config: &ExperimentConfig, dir: &Path, ckpt: Checkpoint, force: bool) -> Result<(RunSummary, Option<String>)> {
    let (tr, warning) = Trainer::resume(config.clone(), ckpt, force)?;
    if !dir.join(MANIFEST_FILE).exists() {
        prepare_dir(&tr, dir)?;
    }
    Ok((drive(tr, dir)?, warning))
}

/// Checks that a finished run directory holds every expected artifact.
pub fn audit_run_dir(dir: &Path) -> Result<()> {
    let missing: Vec<&str> = [MANIFEST_FILE, CONFIG_FILE, METRICS_FILE, FINAL_CHECKPOINT]
        .into_iter()
        .filter(|f| !dir.join(f).is_file())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("run directory lacks {}", missing.join(", "))),
        ))
    }
}
