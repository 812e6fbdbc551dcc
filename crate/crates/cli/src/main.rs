//! `pathsel`: generate synthetic environments, run both training stages,
//! evaluate, export preference pairs and run the ablation grid.

mod commands;
mod staging;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use pathsel::config::{FileConfig, ModeKind};

use commands::Ctx;
use staging::Staging;

#[derive(Parser, Debug)]
#[command(name = "pathsel", version, about = "Reasoning-path selection: GRPO warm start, then online DPO with negative replay")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand, Debug, Clone)]
enum Verb {
    /// Generate a synthetic environment and its initial policy.
    GenEnv(Common),
    /// Stage I: GRPO from the initial policy.
    RunGrpo(Common),
    /// Stage II: online DPO with negative replay from the Stage-I policy.
    RunPso(Common),
    /// Pass@k and thinking-reward distributions for every checkpoint.
    Eval(Common),
    /// Write preference pairs sampled from the latest policy.
    ExportPairs(Common),
    /// Full method and the three ablations from one shared Stage I.
    Ablate(Common),
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// Config file with [run], [env] and [mode] sections. Defaults to
    /// config.toml in the output directory, then built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory shared by all verbs of one experiment.
    #[arg(long)]
    out: PathBuf,
    /// Overrides run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides mode.kind.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Synthetic,
    Remote,
}

type Handler = fn(&Ctx, &Staging) -> Result<()>;

impl Verb {
    fn parts(self) -> (&'static str, Common, Handler) {
        match self {
            Verb::GenEnv(c) => ("gen-env", c, commands::gen_env),
            Verb::RunGrpo(c) => ("run-grpo", c, commands::run_grpo),
            Verb::RunPso(c) => ("run-pso", c, commands::run_pso),
            Verb::Eval(c) => ("eval", c, commands::eval),
            Verb::ExportPairs(c) => ("export-pairs", c, commands::export),
            Verb::Ablate(c) => ("ablate", c, commands::ablate),
        }
    }
}

fn load_config(common: &Common, out: &Path) -> Result<FileConfig> {
    let fallback = out.join(commands::CONFIG);
    let mut cfg = match &common.config {
        Some(p) => FileConfig::load(p)?,
        None if fallback.is_file() => FileConfig::load(&fallback)?,
        None => FileConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    if let Some(mode) = common.mode {
        cfg.mode.kind = match mode {
            Mode::Synthetic => ModeKind::Synthetic,
            Mode::Remote => ModeKind::Remote,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(verb: Verb) -> Result<()> {
    let (name, common, f) = verb.parts();
    let out = common.out.clone();
    let ctx = Ctx {
        cfg: load_config(&common, &out)?,
        out: out.clone(),
    };
    let staging = Staging::new(&out, name)?;
    match f(&ctx, &staging) {
        Ok(()) => {
            for p in staging.commit()? {
                tracing::info!(path = %p.display(), "wrote");
            }
            Ok(())
        }
        Err(e) => {
            Err(match staging.quarantine(&e)? {
                Some(q) => e.context(format!("{name} failed; partial output kept in {}", q.display())),
                None => e.context(format!("{name} failed")),
            })
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
