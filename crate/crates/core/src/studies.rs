//! Desk-scale versions of the observational studies, the component ablation
//! and the schedule-exponent sweep, each with directional verdicts.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::net::VelocityNet;
use crate::sample_eval::{average_reports, task_affinity, TASReport, TAS_INTERVALS};
use crate::schedules::{AlphaKind, SamplerKind};
use crate::train::{final_eval, run_cell, run_parallel, train_net, LrSchedule, StageConfig, Trainer, EPOCH_ITERS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Study {
    Obs1,
    Obs2,
    Obs3,
    Ablation,
    KSweep,
}

impl Study {
    pub const ALL: [Study; 5] = [Study::Obs1, Study::Obs2, Study::Obs3, Study::Ablation, Study::KSweep];

    pub fn name(self) -> &'static str {
        match self {
            Study::Obs1 => "obs1",
            Study::Obs2 => "obs2",
            Study::Obs3 => "obs3",
            Study::Ablation => "ablation",
            Study::KSweep => "ksweep",
        }
    }

    pub fn parse(s: &str) -> Result<Study> {
        Study::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Study::ALL.iter().map(|x| x.name()).collect();
            Error::config(format!("unknown study `{s}`; valid studies: {}", names.join(", ")))
        })
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Shared settings of every study.
#[derive(Clone, Debug)]
pub struct StudyPlan {
    /// Base experiment; `train.T` is the per-run budget.
    pub base: ExperimentConfig,
    pub seeds: Vec<u64>,
    /// Iterations of each pretraining run used as an initialization.
    pub pretrain_iters: u64,
    /// Joint-training iterations over which task affinity is averaged, and
    /// how many measurements are taken in that window.
    pub tas_window: u64,
    pub tas_points: usize,
    pub parallel: usize,
    /// Root for run directories; `None` keeps everything in memory.
    pub out: Option<PathBuf>,
}

impl StudyPlan {
    pub fn new(base: ExperimentConfig) -> Self {
        let pretrain_iters = base.train.total;
        StudyPlan {
            tas_window: base.train.total.max(1),
            base,
            seeds: vec![0, 1, 2],
            pretrain_iters,
            tas_points: 20,
            parallel: 1,
            out: None,
        }
    }

    fn dir(&self, study: Study, parts: &[String]) -> Option<PathBuf> {
        self.out.as_ref().map(|o| {
            let mut p = o.join(study.name());
            for x in parts {
                p.push(x);
            }
            p
        })
    }

    fn cfg(&self, name: String, seed: u64, stages: Vec<StageConfig>) -> ExperimentConfig {
        let mut cfg = self.base.clone();
        cfg.name = name;
        cfg.seed = seed;
        cfg.out_dir = None;
        cfg.train.total = stages.iter().map(|s| s.iters).sum();
        cfg.train.stages = stages;
        cfg
    }
}

/// Laptop-scale base experiment for the studies: a small network on gauss8
/// with a short budget and evaluation every tenth of it.
pub fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        name: "desk".into(),
        ..Default::default()
    };
    cfg.net.hidden = vec![128, 128, 128];
    cfg.net.time_embed_dim = 16;
    cfg.net.max_freq = 3.0;
    cfg.train.total = 4000;
    cfg.train.batch = 256;
    cfg.train.lr = 3e-3;
    cfg.train.lr_schedule = LrSchedule::Cosine;
    cfg.train.log_every = 100;
    cfg.train.eval_every = 400;
    cfg.loss.adp_p = 0.5;
    cfg.eval.samples = 512;
    cfg
}

pub fn median(xs: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// One directional hypothesis and whether this run supports it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub hypothesis: String,
    pub holds: bool,
    pub detail: String,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.holds { "SUPPORTED" } else { "NOT SUPPORTED" };
        write!(f, "{tag}: {} ({})", self.hypothesis, self.detail)
    }
}

/// One run of a study grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyRow {
    pub group: String,
    pub setting: String,
    pub seed: u64,
    pub status: String,
    pub iter: Option<u64>,
    pub w2_1nfe: Option<f64>,
    pub w2_2nfe: Option<f64>,
    pub w2_euler32: Option<f64>,
    pub tas_01_03: Option<f64>,
    pub tas_03_05: Option<f64>,
    pub tas_05_07: Option<f64>,
    pub tas_07_09: Option<f64>,
    /// Fraction of the budget at which a reference W₂ was first reached.
    pub reach_frac: Option<f64>,
    pub error: String,
}

impl StudyRow {
    fn new(group: &str, setting: &str, seed: u64) -> Self {
        StudyRow {
            group: group.into(),
            setting: setting.into(),
            seed,
            status: "ok".into(),
            iter: None,
            w2_1nfe: None,
            w2_2nfe: None,
            w2_euler32: None,
            tas_01_03: None,
            tas_03_05: None,
            tas_05_07: None,
            tas_07_09: None,
            reach_frac: None,
            error: String::new(),
        }
    }

    fn with_eval(mut self, r: &MetricsRecord) -> Self {
        self.iter = Some(r.iter);
        self.w2_1nfe = r.w2_1nfe;
        self.w2_2nfe = r.w2_2nfe;
        self.w2_euler32 = r.w2_euler32;
        self
    }

    fn with_tas(mut self, rep: &TASReport) -> Self {
        let get = |iv: [f64; 2]| {
            rep.intervals
                .iter()
                .position(|&x| x == iv)
                .and_then(|i| rep.values[i])
        };
        self.tas_01_03 = get(TAS_INTERVALS[0]);
        self.tas_03_05 = get(TAS_INTERVALS[1]);
        self.tas_05_07 = get(TAS_INTERVALS[2]);
        self.tas_07_09 = get(TAS_INTERVALS[3]);
        self
    }

    fn failed(mut self, e: &str) -> Self {
        self.status = "failed".into();
        self.error = e.into();
        self
    }
}

#[derive(Clone, Debug, Default)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    pub verdicts: Vec<Verdict>,
}

impl StudyReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv")
    }

    /// Values of `metric` for rows of `group`/`setting` that succeeded.
    pub fn values(&self, group: &str, setting: &str, metric: impl Fn(&StudyRow) -> Option<f64>) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.group == group && r.setting == setting)
            .filter_map(&metric)
            .collect()
    }

    fn extend(&mut self, other: StudyReport) {
        self.rows.extend(other.rows);
        self.verdicts.extend(other.verdicts);
    }
}

struct Cell {
    group: String,
    setting: String,
    seed: u64,
    cfg: ExperimentConfig,
    init: Option<VelocityNet>,
    dir: Option<PathBuf>,
}

fn run_cells(plan: &StudyPlan, cells: Vec<Cell>) -> Vec<(StudyRow, Vec<MetricsRecord>)> {
    run_parallel(&cells, plan.parallel, |c| {
        let row = StudyRow::new(&c.group, &c.setting, c.seed);
        match run_cell(&c.cfg, c.init.as_ref(), c.dir.as_deref()).and_then(|rows| Ok((final_eval(&rows)?, rows))) {
            Ok((fin, rows)) => (row.with_eval(&fin), rows),
            Err(e) => (row.failed(&e.to_string()), Vec::new()),
        }
    })
}

fn fmt_med(x: Option<f64>) -> String {
    x.map_or("n/a".into(), |v| format!("{v:.4}"))
}

/// Median of `metric` over seeds for a setting.
fn med(rep: &StudyReport, group: &str, setting: &str, metric: fn(&StudyRow) -> Option<f64>) -> Option<f64> {
    median(&rep.values(group, setting, metric))
}

fn w2_1(r: &StudyRow) -> Option<f64> {
    r.w2_1nfe
}

fn w2_e32(r: &StudyRow) -> Option<f64> {
    r.w2_euler32
}

fn tas_large(r: &StudyRow) -> Option<f64> {
    r.tas_07_09
}

/// `a < b` on medians; false if either is missing.
fn less(a: Option<f64>, b: Option<f64>) -> bool {
    matches!((a, b), (Some(x), Some(y)) if x < y)
}

fn pretrain_label(frac: f64) -> String {
    format!("{:.0}%", frac * 100.0)
}

/// Fixed-budget allocation between v-pretraining and u-finetuning.
pub fn obs1_allocation(plan: &StudyPlan, fractions: &[f64]) -> Result<StudyReport> {
    let total = plan.base.train.total;
    let mut cells = Vec::new();
    for &seed in &plan.seeds {
        for &f in fractions {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config(format!("pretraining fraction {f} outside [0, 1]")));
            }
            let pre = ((total as f64 * f / EPOCH_ITERS as f64).round() as u64 * EPOCH_ITERS).min(total);
            let label = pretrain_label(f);
            let stages = vec![StageConfig::v_pretrain(pre), StageConfig::u_finetune(total - pre, None)];
            cells.push(Cell {
                group: "allocation".into(),
                setting: label.clone(),
                seed,
                cfg: plan.cfg(format!("obs1-alloc-{label}"), seed, stages),
                init: None,
                dir: plan.dir(Study::Obs1, &[format!("alloc-{}", (f * 100.0).round()), format!("seed-{seed}")]),
            });
        }
    }
    let rows = run_cells(plan, cells).into_iter().map(|(r, _)| r).collect();
    let mut rep = StudyReport {
        rows,
        verdicts: Vec::new(),
    };
    if let (Some(&lo), Some(&hi)) = (fractions.first(), fractions.last()) {
        let a = med(&rep, "allocation", &pretrain_label(hi), w2_1);
        let b = med(&rep, "allocation", &pretrain_label(lo), w2_1);
        rep.verdicts.push(Verdict {
            hypothesis: format!(
                "allocating {} of the budget to v-pretraining beats {} on 1-NFE W2",
                pretrain_label(hi),
                pretrain_label(lo)
            ),
            holds: less(a, b),
            detail: format!("median {} vs {}", fmt_med(a), fmt_med(b)),
        });
    }
    Ok(rep)
}

fn k_label(k: f64) -> String {
    format!("k={k}")
}

/// Joint training with noise injected into the flow-matching targets.
pub fn obs1_corruption(plan: &StudyPlan, ks: &[f64]) -> Result<StudyReport> {
    let total = plan.base.train.total;
    let mut cells = Vec::new();
    for &seed in &plan.seeds {
        for &k in ks {
            let mut stage = StageConfig::joint(total);
            stage.k_noise = k;
            cells.push(Cell {
                group: "corruption".into(),
                setting: k_label(k),
                seed,
                cfg: plan.cfg(format!("obs1-noise-{k}"), seed, vec![stage]),
                init: None,
                dir: plan.dir(Study::Obs1, &[format!("noise-{k}"), format!("seed-{seed}")]),
            });
        }
    }
    let rows = run_cells(plan, cells).into_iter().map(|(r, _)| r).collect();
    let mut rep = StudyReport {
        rows,
        verdicts: Vec::new(),
    };
    if ks.len() >= 2 {
        let clean = med(&rep, "corruption", &k_label(ks[0]), w2_1);
        let worst = med(&rep, "corruption", &k_label(ks[ks.len() - 1]), w2_1);
        rep.verdicts.push(Verdict {
            hypothesis: format!("{} gives worse 1-NFE W2 than {}", k_label(ks[ks.len() - 1]), k_label(ks[0])),
            holds: less(clean, worst),
            detail: format!("median {} vs {}", fmt_med(worst), fmt_med(clean)),
        });
        let mut monotone = 0;
        for &seed in &plan.seeds {
            let per: Vec<Option<f64>> = ks
                .iter()
                .map(|&k| {
                    rep.rows
                        .iter()
                        .find(|r| r.setting == k_label(k) && r.seed == seed)
                        .and_then(|r| r.w2_1nfe)
                })
                .collect();
            if per.iter().all(Option::is_some) && per.windows(2).all(|w| w[0] <= w[1]) {
                monotone += 1;
            }
        }
        let need = (2 * plan.seeds.len()).div_ceil(3);
        rep.verdicts.push(Verdict {
            hypothesis: format!("1-NFE W2 is non-decreasing in k in at least {need} of {} seeds", plan.seeds.len()),
            holds: monotone >= need,
            detail: format!("{monotone} monotone seeds"),
        });
    }
    Ok(rep)
}

fn range_label(r: [f64; 2]) -> String {
    format!("[{}, {}]", r[0], r[1])
}

/// u-only training restricted to gap ranges, from random init and optionally
/// from a v-pretrained model.
pub fn obs2(plan: &StudyPlan, ranges: &[[f64; 2]], with_pretrained: bool) -> Result<StudyReport> {
    let total = plan.base.train.total;
    let mut rows = Vec::new();
    let mut pretrained: Vec<(u64, Option<VelocityNet>)> = Vec::new();
    if with_pretrained {
        let seeds = plan.seeds.clone();
        let nets = run_parallel(&seeds, plan.parallel, |&seed| {
            let cfg = plan.cfg("obs2-v-pretrain".into(), seed, vec![StageConfig::v_pretrain(plan.pretrain_iters)]);
            let dir = plan.dir(Study::Obs2, &["v-pretrain".into(), format!("seed-{seed}")]);
            let res = train_net(&cfg, None, dir.as_deref()).and_then(|net| {
                let eval = crate::sample_eval::eval_suite(&net, &cfg.task, &cfg.eval)?;
                Ok((net, eval))
            });
            (seed, res)
        });
        for (seed, res) in nets {
            let row = StudyRow::new("v-pretrained", "baseline", seed);
            match res {
                Ok((net, eval)) => {
                    rows.push(row.with_eval(&eval));
                    pretrained.push((seed, Some(net)));
                }
                Err(e) => {
                    rows.push(row.failed(&e.to_string()));
                    pretrained.push((seed, None));
                }
            }
        }
    }
    let mut cells = Vec::new();
    for &seed in &plan.seeds {
        for &rg in ranges {
            let stages = vec![StageConfig::u_finetune(total, Some(rg))];
            cells.push(Cell {
                group: "random".into(),
                setting: range_label(rg),
                seed,
                cfg: plan.cfg(format!("obs2-random-{}-{}", rg[0], rg[1]), seed, stages.clone()),
                init: None,
                dir: plan.dir(Study::Obs2, &[format!("random-{}-{}", rg[0], rg[1]), format!("seed-{seed}")]),
            });
            if let Some((_, Some(net))) = pretrained.iter().find(|(s, _)| *s == seed) {
                cells.push(Cell {
                    group: "v-pretrained".into(),
                    setting: range_label(rg),
                    seed,
                    cfg: plan.cfg(format!("obs2-pre-{}-{}", rg[0], rg[1]), seed, stages),
                    init: Some(net.clone()),
                    dir: plan.dir(Study::Obs2, &[format!("pretrained-{}-{}", rg[0], rg[1]), format!("seed-{seed}")]),
                });
            }
        }
    }
    rows.extend(run_cells(plan, cells).into_iter().map(|(r, _)| r));
    let mut rep = StudyReport {
        rows,
        verdicts: Vec::new(),
    };
    if let (Some(&small), Some(&large)) = (ranges.first(), ranges.last()) {
        let a = med(&rep, "random", &range_label(small), w2_e32);
        let b = med(&rep, "random", &range_label(large), w2_e32);
        rep.verdicts.push(Verdict {
            hypothesis: format!(
                "from random init, u-training on {} gives better euler-v 32-NFE W2 than on {}",
                range_label(small),
                range_label(large)
            ),
            holds: less(a, b),
            detail: format!("median {} vs {}", fmt_med(a), fmt_med(b)),
        });
        if with_pretrained {
            let base = med(&rep, "v-pretrained", "baseline", w2_e32);
            let a = med(&rep, "v-pretrained", &range_label(small), w2_e32);
            let b = med(&rep, "v-pretrained", &range_label(large), w2_e32);
            rep.verdicts.push(Verdict {
                hypothesis: format!(
                    "on a v-pretrained model, {} u-training degrades euler-v 32-NFE W2 more than {}",
                    range_label(large),
                    range_label(small)
                ),
                holds: less(a, b),
                detail: format!(
                    "median {} vs {} (pretrained {})",
                    fmt_med(b),
                    fmt_med(a),
                    fmt_med(base)
                ),
            });
        }
    }
    Ok(rep)
}

/// Which model a task-affinity window starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AffinityInit {
    Random,
    VPretrained,
    SmallGapPretrained,
}

impl AffinityInit {
    pub fn name(self) -> &'static str {
        match self {
            AffinityInit::Random => "random",
            AffinityInit::VPretrained => "v-pretrained",
            AffinityInit::SmallGapPretrained => "small-gap-pretrained",
        }
    }
}

/// Average task affinity over a window of joint training started from `net`.
pub fn affinity_window(plan: &StudyPlan, net: VelocityNet, seed: u64) -> Result<TASReport> {
    let mut cfg = plan.cfg("obs3-window".into(), seed, vec![StageConfig::joint(plan.tas_window)]);
    cfg.train.eval_every = 0;
    let mut tr = Trainer::with_net(cfg.clone(), net)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a5_0000);
    let points = plan.tas_points.max(1) as u64;
    let mut reports = Vec::new();
    for k in 0..points {
        let target = plan.tas_window * k / points.max(2).saturating_sub(1).max(1);
        while tr.iteration() < target.min(plan.tas_window) {
            tr.step()?;
        }
        reports.push(task_affinity(
            tr.net(),
            &cfg.task,
            &cfg.schedule,
            &cfg.loss,
            &cfg.tas,
            &mut rng,
        )?);
    }
    average_reports(&reports).ok_or_else(|| Error::config("no affinity measurements"))
}

/// Task affinity from random init and from pretrained models.
pub fn obs3(plan: &StudyPlan, inits: &[AffinityInit]) -> Result<StudyReport> {
    let jobs: Vec<(u64, AffinityInit)> = plan
        .seeds
        .iter()
        .flat_map(|&s| inits.iter().map(move |&i| (s, i)))
        .collect();
    let rows = run_parallel(&jobs, plan.parallel, |&(seed, init)| {
        let row = StudyRow::new("affinity", init.name(), seed);
        let res = (|| {
            let net = match init {
                AffinityInit::Random => {
                    let cfg = plan.cfg("obs3-random".into(), seed, vec![StageConfig::joint(0)]);
                    Trainer::new(cfg)?.net().clone()
                }
                AffinityInit::VPretrained => {
                    let cfg = plan.cfg("obs3-v".into(), seed, vec![StageConfig::v_pretrain(plan.pretrain_iters)]);
                    let dir = plan.dir(Study::Obs3, &["v-pretrain".into(), format!("seed-{seed}")]);
                    train_net(&cfg, None, dir.as_deref())?
                }
                AffinityInit::SmallGapPretrained => {
                    let stage = StageConfig::u_finetune(plan.pretrain_iters, Some(TAS_INTERVALS[0]));
                    let cfg = plan.cfg("obs3-u-small".into(), seed, vec![stage]);
                    let dir = plan.dir(Study::Obs3, &["small-gap-pretrain".into(), format!("seed-{seed}")]);
                    train_net(&cfg, None, dir.as_deref())?
                }
            };
            affinity_window(plan, net, seed)
        })();
        match res {
            Ok(rep) => row.with_tas(&rep),
            Err(e) => row.failed(&e.to_string()),
        }
    });
    let mut rep = StudyReport {
        rows,
        verdicts: Vec::new(),
    };
    let rnd = med(&rep, "affinity", AffinityInit::Random.name(), tas_large);
    for init in [AffinityInit::SmallGapPretrained, AffinityInit::VPretrained] {
        if inits.contains(&init) && inits.contains(&AffinityInit::Random) {
            let m = med(&rep, "affinity", init.name(), tas_large);
            rep.verdicts.push(Verdict {
                hypothesis: format!(
                    "{} has higher task affinity with the [0.7, 0.9] u-loss than random init",
                    init.name()
                ),
                holds: less(rnd, m),
                detail: format!("median {} vs {}", fmt_med(m), fmt_med(rnd)),
            });
        }
    }
    Ok(rep)
}

/// A named combination of the training improvements.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Variant {
    pub name: &'static str,
    pub alpha: AlphaKind,
    pub sampler: SamplerKind,
    pub progressive: bool,
}

pub const VANILLA: Variant = Variant {
    name: "vanilla",
    alpha: AlphaKind::Unit,
    sampler: SamplerKind::Base,
    progressive: false,
};

pub const FULL: Variant = Variant {
    name: "adaptive+weighting",
    alpha: AlphaKind::Unit,
    sampler: SamplerKind::Adaptive,
    progressive: true,
};

pub const ABLATION_VARIANTS: [Variant; 6] = [
    VANILLA,
    Variant {
        name: "clamped-snr",
        alpha: AlphaKind::ClampedSnr,
        sampler: SamplerKind::Base,
        progressive: false,
    },
    Variant {
        name: "adaptive",
        alpha: AlphaKind::Unit,
        sampler: SamplerKind::Adaptive,
        progressive: false,
    },
    Variant {
        name: "weighting",
        alpha: AlphaKind::Unit,
        sampler: SamplerKind::Base,
        progressive: true,
    },
    Variant {
        name: "clamped-snr+weighting",
        alpha: AlphaKind::ClampedSnr,
        sampler: SamplerKind::Base,
        progressive: true,
    },
    FULL,
];

fn variant_cfg(plan: &StudyPlan, v: &Variant, seed: u64) -> ExperimentConfig {
    let mut cfg = plan.cfg(format!("ablation-{}", v.name), seed, vec![StageConfig::joint(plan.base.train.total)]);
    cfg.schedule.alpha = v.alpha;
    cfg.schedule.sampler = v.sampler;
    cfg.schedule.progressive = v.progressive;
    cfg
}

/// First budget fraction at which `rows` reach `w2` on 1-NFE.
pub fn reach_fraction(rows: &[MetricsRecord], w2: f64, total: u64) -> Option<f64> {
    rows.iter()
        .filter(|r| matches!(r.w2_1nfe, Some(x) if x <= w2))
        .map(|r| r.iter as f64 / total as f64)
        .next()
}

/// Component ablation with an evaluation curve per run; the full method's
/// rows record when they first reach vanilla's final 1-NFE W₂.
pub fn ablation(plan: &StudyPlan, variants: &[Variant]) -> Result<StudyReport> {
    let mut cells = Vec::new();
    for &seed in &plan.seeds {
        for v in variants {
            cells.push(Cell {
                group: "ablation".into(),
                setting: v.name.into(),
                seed,
                cfg: variant_cfg(plan, v, seed),
                init: None,
                dir: plan.dir(Study::Ablation, &[v.name.replace('+', "-"), format!("seed-{seed}")]),
            });
        }
    }
    let total = plan.base.train.total;
    let results = run_cells(plan, cells);
    let mut rows = Vec::new();
    for (row, curve) in &results {
        let mut row = row.clone();
        if let Some((vrow, _)) = results
            .iter()
            .find(|(r, _)| r.setting == VANILLA.name && r.seed == row.seed && r.status == "ok")
        {
            if let Some(target) = vrow.w2_1nfe {
                row.reach_frac = reach_fraction(curve, target, total).or(Some(f64::INFINITY));
            }
        }
        rows.push(row);
    }
    let mut rep = StudyReport {
        rows,
        verdicts: Vec::new(),
    };
    if variants.contains(&VANILLA) && variants.contains(&FULL) {
        let reach = med(&rep, "ablation", FULL.name, |r| r.reach_frac);
        rep.verdicts.push(Verdict {
            hypothesis: format!(
                "{} reaches vanilla's final 1-NFE W2 within 70% of the iterations",
                FULL.name
            ),
            holds: matches!(reach, Some(x) if x <= 0.7),
            detail: format!("median fraction {}", fmt_med(reach)),
        });
        let a = med(&rep, "ablation", FULL.name, w2_1);
        let b = med(&rep, "ablation", VANILLA.name, w2_1);
        rep.verdicts.push(Verdict {
            hypothesis: format!("{} ends at or below vanilla's final 1-NFE W2", FULL.name),
            holds: matches!((a, b), (Some(x), Some(y)) if x <= y),
            detail: format!("median {} vs {}", fmt_med(a), fmt_med(b)),
        });
    }
    Ok(rep)
}

/// Full method with different progress exponents.
pub fn ksweep(plan: &StudyPlan, ks: &[f64]) -> Result<StudyReport> {
    let mut cells = Vec::new();
    for &seed in &plan.seeds {
        for &k in ks {
            let mut cfg = variant_cfg(plan, &FULL, seed);
            cfg.name = format!("ksweep-{k}");
            cfg.schedule.k_sched = k;
            cells.push(Cell {
                group: "ksweep".into(),
                setting: k_label(k),
                seed,
                cfg,
                init: None,
                dir: plan.dir(Study::KSweep, &[format!("k-{k}"), format!("seed-{seed}")]),
            });
        }
    }
    let rows = run_cells(plan, cells).into_iter().map(|(r, _)| r).collect();
    let mut rep = StudyReport {
        rows,
        verdicts: Vec::new(),
    };
    if ks.contains(&1.0) {
        let mut meds: Vec<(f64, f64)> = ks
            .iter()
            .filter_map(|&k| med(&rep, "ksweep", &k_label(k), w2_1).map(|m| (k, m)))
            .collect();
        meds.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite medians"));
        let rank = meds.iter().position(|&(k, _)| k == 1.0);
        let listing: Vec<String> = meds.iter().map(|(k, m)| format!("k={k}: {m:.4}")).collect();
        rep.verdicts.push(Verdict {
            hypothesis: "k=1 is among the two best 1-NFE W2 medians".into(),
            holds: matches!(rank, Some(r) if r < 2),
            detail: listing.join(", "),
        });
    }
    Ok(rep)
}

pub const ALLOCATION_FRACTIONS: [f64; 5] = [0.0, 0.05, 0.1, 0.15, 0.2];
pub const NOISE_SCALES: [f64; 3] = [0.0, 0.03, 0.1];
pub const K_VALUES: [f64; 4] = [0.5, 1.0, 2.0, 3.0];

/// Runs a full study, writes `<out>/<study>.csv` and `<out>/<study>-verdicts.txt`
/// when the plan has an output root, and returns the report.
pub fn reproduce(study: Study, plan: &StudyPlan) -> Result<StudyReport> {
    let rep = match study {
        Study::Obs1 => {
            let mut r = obs1_allocation(plan, &ALLOCATION_FRACTIONS)?;
            r.extend(obs1_corruption(plan, &NOISE_SCALES)?);
            r
        }
        Study::Obs2 => obs2(plan, &TAS_INTERVALS, true)?,
        Study::Obs3 => obs3(
            plan,
            &[
                AffinityInit::Random,
                AffinityInit::VPretrained,
                AffinityInit::SmallGapPretrained,
            ],
        )?,
        Study::Ablation => ablation(plan, &ABLATION_VARIANTS)?,
        Study::KSweep => ksweep(plan, &K_VALUES)?,
    };
    if let Some(out) = &plan.out {
        write_report(study, &rep, out)?;
    }
    Ok(rep)
}

pub fn write_report(study: Study, rep: &StudyReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let csv = out.join(format!("{}.csv", study.name()));
    fs::write(&csv, rep.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let txt = out.join(format!("{}-verdicts.txt", study.name()));
    let body: String = rep.verdicts.iter().map(|v| format!("{v}\n")).collect();
    fs::write(&txt, body).map_err(|e| Error::io(&txt, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn study_names() {
        for s in Study::ALL {
            assert_eq!(Study::parse(s.name()).unwrap(), s);
        }
        let err = Study::parse("obs4").unwrap_err().to_string();
        assert!(err.contains("obs1") && err.contains("ksweep"), "{err}");
    }

    #[test]
    fn reach_fraction_finds_first_hit() {
        let rows: Vec<MetricsRecord> = [(100, 0.9), (200, 0.5), (300, 0.4)]
            .iter()
            .map(|&(i, w)| MetricsRecord {
                iter: i,
                w2_1nfe: Some(w),
                ..Default::default()
            })
            .collect();
        assert_eq!(reach_fraction(&rows, 0.6, 1000), Some(0.2));
        assert_eq!(reach_fraction(&rows, 0.1, 1000), None);
    }
}
