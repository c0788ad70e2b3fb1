use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use meanflow::config::{config_reference, ExperimentConfig};
use meanflow::data::{DataSampler, Task};
use meanflow::net::Checkpoint;
use meanflow::sample_eval::{evaluate, noise_baseline, sample, EvalConfig, LabelPolicy, SampleDump, SamplerMode, SamplerSpec};
use meanflow::studies::{desk_config, reproduce, Study, StudyPlan};
use meanflow::train;
use meanflow::{Error, Result};

/// MeanFlow training laboratory on low-dimensional toy tasks.
#[derive(Parser)]
#[command(name = "meanflow", version)]
struct Cli {
    /// Root directory for run outputs.
    #[arg(long, global = true, env = "MEANFLOW_OUT", default_value = "runs")]
    out_root: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one experiment.
    Train {
        /// TOML config; defaults apply when omitted.
        config: Option<PathBuf>,
        /// Override a config key, e.g. `--set train.T=100`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume even if the checkpoint was made with a different config.
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint with exact W₂ against ground truth.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value = "gauss8")]
        task: String,
        /// Mean-step NFE values, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        nfe: Vec<usize>,
        /// Euler-v NFE values, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "32")]
        euler_nfe: Vec<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV (default: eval.csv next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a study grid and write its CSV and verdicts.
    Reproduce {
        #[arg(value_name = "STUDY")]
        study: String,
        /// Base config; the built-in desk-scale config when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Independent runs to execute concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Output directory (default: <out-root>/reproduce).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint and dump them as CSV and binary.
    Sample {
        checkpoint: PathBuf,
        #[arg(long, short, default_value_t = 1000)]
        n: usize,
        #[arg(long, value_enum, default_value_t = Mode::MeanStep)]
        mode: Mode,
        #[arg(long, default_value_t = 1)]
        nfe: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output path stem; `.csv` and `.bin` are appended.
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// Print every config key with its default.
    ConfigReference,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    MeanStep,
    EulerV,
}

impl From<Mode> for SamplerMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::MeanStep => SamplerMode::MeanStep,
            Mode::EulerV => SamplerMode::EulerV,
        }
    }
}

fn load_config(path: Option<&Path>, overrides: &[String], fallback: ExperimentConfig) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p, overrides),
        None => ExperimentConfig::from_toml_with_overrides(&fallback.to_toml(), overrides),
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.4}"))
}

fn cmd_train(root: &Path, config: Option<&Path>, overrides: &[String], resume: Option<&Path>, force: bool) -> Result<()> {
    let cfg = load_config(config, overrides, ExperimentConfig::default())?;
    let dir = cfg.run_dir(root);
    let summary = match resume {
        Some(ckpt) => {
            let ckpt = Checkpoint::load_for(ckpt, &cfg.net)?;
            let (summary, warning) = train::resume(&cfg, &dir, ckpt, force)?;
            if let Some(w) = warning {
                eprintln!("warning: {w}");
            }
            summary
        }
        None => train::train(&cfg, &dir)?,
    };
    if let Some(r) = summary.final_eval() {
        println!(
            "iter {}: W2 1-NFE {}, 2-NFE {}, euler-32 {}",
            r.iter,
            fmt_opt(r.w2_1nfe),
            fmt_opt(r.w2_2nfe),
            fmt_opt(r.w2_euler32)
        );
    }
    println!("run directory: {}", summary.dir.display());
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    task: &str,
    nfe: &[usize],
    euler_nfe: &[usize],
    samples: Option<usize>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    let task = Task::parse(task)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.net.data_dim() != task.dim() {
        return Err(Error::Config(format!(
            "checkpoint {} has data_dim {} but task {} is {}-dimensional",
            checkpoint.display(),
            ckpt.net.data_dim(),
            task.name(),
            task.dim()
        )));
    }
    let mut cfg = EvalConfig::default();
    if let Some(n) = samples {
        cfg.samples = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let samplers: Vec<(SamplerMode, usize)> = nfe
        .iter()
        .map(|&n| (SamplerMode::MeanStep, n))
        .chain(euler_nfe.iter().map(|&n| (SamplerMode::EulerV, n)))
        .collect();
    let entries = evaluate(&ckpt.net, &task, &cfg, &samplers)?;
    let baseline = noise_baseline(&task, &cfg)?;
    let mut csv = String::from("iter,mode,nfe,w2\n");
    println!("checkpoint iteration {} on {} ({} samples)", ckpt.iteration, task.name(), cfg.samples);
    for e in &entries {
        let mode = match e.mode {
            SamplerMode::MeanStep => "mean-step",
            SamplerMode::EulerV => "euler-v",
        };
        println!("{mode:>9} nfe {:>3}: W2 = {:.6}", e.nfe, e.w2);
        csv.push_str(&format!("{},{mode},{},{}\n", ckpt.iteration, e.nfe, e.w2));
    }
    println!("noise baseline: W2 = {baseline:.6}");
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => checkpoint.with_file_name("eval.csv"),
    };
    std::fs::write(&path, csv).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_reproduce(
    root: &Path,
    study: &str,
    config: Option<&Path>,
    overrides: &[String],
    seeds: &[u64],
    parallel: usize,
    out: Option<&Path>,
) -> Result<()> {
    let study = Study::parse(study)?;
    let base = load_config(config, overrides, desk_config())?;
    let mut plan = StudyPlan::new(base);
    plan.seeds = seeds.to_vec();
    plan.parallel = parallel.max(1);
    let out = out.map_or_else(|| root.join("reproduce"), Path::to_path_buf);
    plan.out = Some(out.clone());
    let rep = reproduce(study, &plan)?;
    let failed = rep.rows.iter().filter(|r| r.status != "ok").count();
    for v in &rep.verdicts {
        println!("{v}");
    }
    if failed > 0 {
        eprintln!("warning: {failed} of {} runs failed; see the error column", rep.rows.len());
    }
    println!("wrote {}", out.join(format!("{study}.csv")).display());
    Ok(())
}

fn cmd_sample(checkpoint: &Path, n: usize, mode: Mode, nfe: usize, seed: u64, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let spec = SamplerSpec::uniform(mode.into(), nfe)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Option<Vec<usize>> = match ckpt.net.config().num_labels {
        0 => None,
        k => Some((0..n).map(|_| rng.gen_range(0..k)).collect()),
    };
    let policy = labels.clone().map_or(LabelPolicy::None, LabelPolicy::Given);
    let points = sample(&ckpt.net, &spec, n, &mut rng, &policy)?;
    let labels = labels.map(|l| l.into_iter().map(|x| x as u32).collect());
    SampleDump::new(points, labels)?.write(out)?;
    println!("wrote {} and {}", out.with_extension("csv").display(), out.with_extension("bin").display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train {
            config,
            overrides,
            resume,
            force,
        } => cmd_train(&cli.out_root, config.as_deref(), &overrides, resume.as_deref(), force),
        Cmd::Eval {
            checkpoint,
            task,
            nfe,
            euler_nfe,
            samples,
            seed,
            out,
        } => cmd_eval(&checkpoint, &task, &nfe, &euler_nfe, samples, seed, out.as_deref()),
        Cmd::Reproduce {
            study,
            config,
            overrides,
            seeds,
            parallel,
            out,
        } => cmd_reproduce(&cli.out_root, &study, config.as_deref(), &overrides, &seeds, parallel, out.as_deref()),
        Cmd::Sample {
            checkpoint,
            n,
            mode,
            nfe,
            seed,
            out,
        } => cmd_sample(&checkpoint, n, mode, nfe, seed, &out),
        Cmd::ConfigReference => {
            print!("{}", config_reference());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
