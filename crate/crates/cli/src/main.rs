use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use skillbench::harness::{self, export::ExportFormat, RunConfig, RunOptions};
use tracing_subscriber::EnvFilter;

/// Quality-diversity and skill-discovery experiments on point environments.
///
/// Every config key can be overridden with an environment variable such as
/// `SKB_MAP_ELITES__SIGMA_ISO=0.01` (double underscore between sections).
#[derive(Parser)]
#[command(name = "skillbench", version)]
struct Cli {
    /// Worker threads for evaluation; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.display().to_string();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a method and write metrics and checkpoints.
    Run {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Checkpoint and exit after this iteration.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Export plot-ready data from run directories.
    Export {
        /// repertoire-csv, metrics-csv, adaptation-csv or summary-json.
        #[arg(long)]
        format: ExportFormat,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run directories (several for summary-json).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Few-shot adaptation of a trained run under the [adapt] settings.
    Adapt {
        /// Run directory holding the trained skills.
        run: PathBuf,
        /// Config whose [adapt] section replaces the stored one.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a meta-controller over frozen skills.
    Hier {
        #[command(flatten)]
        common: Common,
        /// Run directory supplying the skills; the hand-built run/jump pair
        /// is used when absent.
        #[arg(long)]
        skills: Option<PathBuf>,
    },
    /// Hyperparameter sensitivity sweep over one or more method configs.
    Sweep {
        /// Method configs; repeat the flag to compare methods.
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the SMERL target return with plain SAC.
    SmerlTarget {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        if n == 0 {
            bail!("--workers must be at least 1");
        }
        pool = pool.num_threads(n);
    }
    pool.build()?.install(|| dispatch(cli.command))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run {
            common,
            resume,
            stop_after,
        } => {
            let cfg = common.load()?;
            let dir = PathBuf::from(&cfg.out);
            let opts = RunOptions { resume, stop_after };
            let done = harness::run(&cfg, &dir, &opts).with_context(|| format!("run in {}", dir.display()))?;
            println!(
                "{} iteration {} env_steps {} coverage {} qd_score {}{}",
                dir.display(),
                done.last.iteration,
                done.last.env_steps,
                done.last.coverage,
                done.last.qd_score,
                if done.finished { "" } else { " (stopped early)" }
            );
        }
        Command::Export { format, out, runs } => {
            let text = harness::export(&runs, format)?;
            emit(out.as_deref(), &text)?;
        }
        Command::Adapt { run, config } => {
            let settings = match config {
                Some(p) => Some(RunConfig::load(Some(&p))?.adapt),
                None => None,
            };
            let report = harness::adapt(&run, settings.as_ref())?;
            print!("{}", report.to_csv());
        }
        Command::Hier { common, skills } => {
            let cfg = common.load()?;
            let out = PathBuf::from(&cfg.out);
            let outcome = harness::hier(&cfg, skills.as_deref(), &out)?;
            let best_single = outcome.single_skill_fitness.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let last = outcome.curve.last().map_or(f64::NAN, |c| c.greedy_fitness);
            println!("best single skill {best_single}; meta-controller {last}");
        }
        Command::Sweep { configs, seed, out } => {
            let mut cfgs = Vec::with_capacity(configs.len());
            for p in &configs {
                let mut c = RunConfig::load(Some(p)).with_context(|| p.display().to_string())?;
                if let Some(s) = seed {
                    c.seed = s;
                }
                cfgs.push(c);
            }
            let outcome = harness::sweep(&cfgs, Some(&out))?;
            for s in &outcome.summaries {
                println!("{} median {} iqr {}", s.method, s.median, s.iqr());
            }
        }
        Command::SmerlTarget { common } => {
            let cfg = common.load()?;
            let target = harness::smerl_target(&cfg)?;
            let out = PathBuf::from(&cfg.out);
            std::fs::create_dir_all(&out)?;
            let path = out.join("smerl.toml");
            emit(Some(&path), &target.fragment())?;
            print!("{}", target.fragment());
        }
    }
    Ok(())
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| p.display().to_string())?,
        None => print!("{text}"),
    }
    Ok(())
}
