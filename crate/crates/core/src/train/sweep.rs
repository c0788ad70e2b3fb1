use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use super::{train, train_from, StageConfig, Trainer, FINAL_CHECKPOINT, METRICS_FILE};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{read_metrics, MetricsRecord};
use crate::net::{Checkpoint, VelocityNet};

/// Iterations per "epoch" on sweep axes measured in epochs.
pub const EPOCH_ITERS: u64 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// Epochs of v-pretraining within the fixed budget `T`; the remainder is
    /// u-finetuning.
    PretrainEpochs,
    /// Noise scale on the flow-matching targets of every stage.
    KNoise,
    /// Gap restriction on every stage that has gap rows.
    DtRange,
    /// Progress exponent `k`.
    KSched,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::PretrainEpochs => "pretrain_epochs",
            SweepAxis::KNoise => "k_noise",
            SweepAxis::DtRange => "dt_range",
            SweepAxis::KSched => "k_sched",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SweepValue {
    Scalar(f64),
    Range([f64; 2]),
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Scalar(x) => write!(f, "{x}"),
            SweepValue::Range([a, b]) => write!(f, "{a}-{b}"),
        }
    }
}

/// Derives the configuration of one sweep cell from `base`.
pub fn cell_config(base: &ExperimentConfig, axis: SweepAxis, value: SweepValue) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    let mismatch = || Error::config(format!("value {value} does not fit sweep axis {}", axis.name()));
    match (axis, value) {
        (SweepAxis::PretrainEpochs, SweepValue::Scalar(e)) => {
            if !(e >= 0.0 && e.fract() == 0.0) {
                return Err(mismatch());
            }
            let pre = e as u64 * EPOCH_ITERS;
            let total = cfg.train.total;
            if pre > total {
                return Err(Error::config(format!("{pre} pretraining iterations exceed train.T = {total}")));
            }
            cfg.train.stages = vec![StageConfig::v_pretrain(pre), StageConfig::u_finetune(total - pre, None)];
        }
        (SweepAxis::KNoise, SweepValue::Scalar(k)) => {
            let mut stages = cfg.train.resolved_stages();
            stages.iter_mut().for_each(|s| s.k_noise = k);
            cfg.train.stages = stages;
        }
        (SweepAxis::DtRange, SweepValue::Range(r)) => {
            let mut stages = cfg.train.resolved_stages();
            for s in stages.iter_mut() {
                if s.fm_ratio != Some(1.0) {
                    s.dt_range = Some(r);
                }
            }
            cfg.train.stages = stages;
        }
        (SweepAxis::KSched, SweepValue::Scalar(k)) => cfg.schedule.k_sched = k,
        _ => return Err(mismatch()),
    }
    cfg.name = format!("{}-{}={}", base.name, axis.name(), value);
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub value: SweepValue,
    pub seed: u64,
    /// Final metrics row, or the error that stopped the cell.
    pub outcome: std::result::Result<MetricsRecord, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub cells: Vec<SweepCell>,
}

#[derive(Serialize)]
struct SweepRow<'a> {
    axis: &'a str,
    value: String,
    seed: u64,
    status: &'a str,
    iter: Option<u64>,
    loss_total: Option<f64>,
    w2_1nfe: Option<f64>,
    w2_2nfe: Option<f64>,
    w2_euler32: Option<f64>,
    error: &'a str,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for c in &self.cells {
            let (status, rec, err) = match &c.outcome {
                Ok(r) => ("ok", Some(r), ""),
                Err(e) => ("failed", None, e.as_str()),
            };
            w.serialize(SweepRow {
                axis: self.axis.name(),
                value: c.value.to_string(),
                seed: c.seed,
                status,
                iter: rec.map(|r| r.iter),
                loss_total: rec.and_then(|r| r.loss_total),
                w2_1nfe: rec.and_then(|r| r.w2_1nfe),
                w2_2nfe: rec.and_then(|r| r.w2_2nfe),
                w2_euler32: rec.and_then(|r| r.w2_euler32),
                error: err,
            })
            .expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Metrics rows of a finished run directory, if it is complete.
pub fn finished_run(dir: &Path) -> Option<Vec<MetricsRecord>> {
    if !dir.join(FINAL_CHECKPOINT).is_file() {
        return None;
    }
    read_metrics(&dir.join(METRICS_FILE)).ok()
}

/// The last row carrying W₂ values.
pub fn final_eval(rows: &[MetricsRecord]) -> Result<MetricsRecord> {
    rows.iter()
        .rev()
        .find(|r| r.has_eval())
        .cloned()
        .ok_or_else(|| Error::config("run finished without an evaluation row (train.T = 0?)"))
}

/// Runs one configuration to completion and returns all its metrics rows.
/// With `dir`, artifacts are written there and a finished directory is
/// reused instead of retrained.
pub fn run_cell(cfg: &ExperimentConfig, init: Option<&VelocityNet>, dir: Option<&Path>) -> Result<Vec<MetricsRecord>> {
    match dir {
        Some(d) => {
            if let Some(rows) = finished_run(d) {
                return Ok(rows);
            }
            let summary = match init {
                Some(net) => train_from(cfg, net.clone(), d)?,
                None => train(cfg, d)?,
            };
            Ok(summary.records)
        }
        None => {
            let mut tr = match init {
                Some(net) => Trainer::with_net(cfg.clone(), net.clone())?,
                None => Trainer::new(cfg.clone())?,
            };
            let mut rows: Vec<MetricsRecord> = Vec::new();
            tr.run(&mut rows)?;
            Ok(rows)
        }
    }
}

/// Trains `cfg` and returns the final network; a finished `dir` is reused.
pub fn train_net(cfg: &ExperimentConfig, init: Option<&VelocityNet>, dir: Option<&Path>) -> Result<VelocityNet> {
    match dir {
        Some(d) => {
            let ckpt = d.join(FINAL_CHECKPOINT);
            if ckpt.is_file() {
                return Ok(Checkpoint::load_for(&ckpt, &cfg.net)?.net);
            }
            let summary = match init {
                Some(net) => train_from(cfg, net.clone(), d)?,
                None => train(cfg, d)?,
            };
            Ok(summary.checkpoint.net)
        }
        None => {
            let mut tr = match init {
                Some(net) => Trainer::with_net(cfg.clone(), net.clone())?,
                None => Trainer::new(cfg.clone())?,
            };
            let mut rows: Vec<MetricsRecord> = Vec::new();
            tr.run(&mut rows)?;
            Ok(tr.net().clone())
        }
    }
}

/// Runs `items` on up to `parallel` threads, keeping input order.
pub fn run_parallel<T: Sync, R: Send>(items: &[T], parallel: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    let workers = parallel.max(1).min(items.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every item ran"))
        .collect()
}

/// One full run per value with the base seed, optionally from a shared
/// initialization. Cell failures are recorded and the sweep continues.
/// With `out`, cell `v` writes to `out/<axis>=<v>` and finished cells are
/// skipped on rerun.
pub fn run_stage_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[SweepValue],
    init: Option<&VelocityNet>,
    out: Option<&Path>,
    parallel: usize,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::config(format!("sweep over {} needs at least one value", axis.name())));
    }
    let cfgs: Vec<(SweepValue, Result<ExperimentConfig>)> =
        values.iter().map(|&v| (v, cell_config(base, axis, v))).collect();
    let cells = run_parallel(&cfgs, parallel, |(value, cfg)| {
        let outcome = cfg.as_ref().map_err(|e| e.to_string()).and_then(|cfg| {
            let dir: Option<PathBuf> = out.map(|o| o.join(format!("{}={}", axis.name(), value)));
            run_cell(cfg, init, dir.as_deref())
                .and_then(|rows| final_eval(&rows))
                .map_err(|e| e.to_string())
        });
        SweepCell {
            value: *value,
            seed: base.seed,
            outcome,
        }
    });
    Ok(SweepTable { axis, cells })
}
