use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rppg_cli::ablate::{ablate, parse_modes, AblateArgs};
use rppg_cli::checkpoint::Checkpoint;
use rppg_cli::config::RunConfig;
use rppg_cli::cost::{cost_table, report_cost};
use rppg_cli::data::{generate, open_split, Split};
use rppg_cli::evaluate::{eval_schedule, summary_table, write_reports};
use rppg_cli::train::train;

#[derive(Parser)]
#[command(name = "rppg", version, about = "Resolution- and motion-robust rPPG on synthetic face video")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic train/val dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Dual-view training.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated schedule labels; the config's list when omitted.
        #[arg(long)]
        schedule: Option<String>,
    },
    /// Train or load several variants and tabulate their MAE.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Evaluate on this dataset's validation split instead.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated variant names.
        #[arg(long)]
        modes: String,
        #[arg(long)]
        schedule: Option<String>,
        /// Directory of existing `{mode}.ckpt` or `{mode}/last.ckpt` files.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print parameter and FLOP counts per module.
    ReportCost {
        #[command(flatten)]
        common: Common,
        /// Emit JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

fn schedules(arg: Option<&str>, cfg: &RunConfig) -> Vec<String> {
    match arg {
        Some(s) => s.split(',').map(|l| l.trim().to_string()).collect(),
        None => cfg.eval.schedules.clone(),
    }
}

fn cmd_eval(common: &Common, checkpoint: &Path, data: &Path, out: &Path, schedule: Option<&str>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg = ck.config()?;
    let expected = common.config.as_ref().map(|_| common.load()).transpose()?;
    let model = ck.model(expected.as_ref())?;
    if let Some(e) = expected {
        cfg.eval = e.eval;
    }
    let labels = schedules(schedule, &cfg);
    for l in &labels {
        rppg_cli::config::parse_schedule(l)?;
    }
    let videos = open_split(data, Split::Val)?;
    if videos.is_empty() {
        bail!("no validation videos under {}", data.display());
    }
    let protocol = cfg.protocol();
    let evals = labels.iter().map(|l| eval_schedule(&model, &videos, l, &protocol)).collect::<Result<Vec<_>>>()?;
    let rows = write_reports(&evals, &videos, &protocol, out)?;
    print!("{}", summary_table(&rows));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Generate { common, out, force } => {
            let m = generate(&common.load()?, &out, force)?;
            println!("wrote {} videos to {}", m.videos.len(), out.display());
        }
        Cmd::Train { common, data, out, checkpoint } => {
            let o = train(&common.load()?, &data, &out, checkpoint.as_deref())?;
            println!("{} steps; checkpoints {} and {}", o.steps, o.last.display(), o.best.display());
        }
        Cmd::Eval { common, checkpoint, data, out, schedule } => {
            cmd_eval(&common, &checkpoint, &data, &out, schedule.as_deref())?
        }
        Cmd::Ablate { common, data, eval_data, out, modes, schedule, checkpoint } => {
            let cfg = common.load()?;
            let modes = parse_modes(&modes)?;
            let labels = schedules(schedule.as_deref(), &cfg);
            let report = ablate(&AblateArgs {
                base: &cfg,
                data: &data,
                eval_data: eval_data.as_deref(),
                out: &out,
                modes: &modes,
                schedules: &labels,
                checkpoints: checkpoint.as_deref(),
            })?;
            print!("{}", report.table());
        }
        Cmd::ReportCost { common, json } => {
            let cfg = common.load()?;
            let rows = report_cost(&cfg.model, cfg.t);
            if json {
                println!("{}", serde_json::to_string_pretty(&rows)?);
            } else {
                print!("{}", cost_table(&rows));
            }
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
