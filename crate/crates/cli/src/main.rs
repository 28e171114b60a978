use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use porestack::models::Family;
use porestack_cli::commands;
use porestack_cli::config::{Device, DEVICE_ENV};
use porestack_cli::error::{Category, CliError, Result};
use porestack_cli::workspace::{write_output, Lock, Workspace};

#[derive(Parser)]
#[command(name = "porestack", version, about = "Stacked surrogate models for reactive dissolution")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment directory.
    #[arg(long, global = true, default_value = ".")]
    dir: PathBuf,
    /// Config file; defaults to <dir>/experiment.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// cpu or auto; also read from PORESTACK_DEVICE.
    #[arg(long, global = true)]
    device: Option<String>,
    /// Base-network input channels, 4 or 7.
    #[arg(long, global = true)]
    features: Option<usize>,
    /// Correction levels on top of the base network.
    #[arg(long, global = true)]
    levels: Option<usize>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the effective configuration to <dir>/experiment.toml.
    Init,
    /// Generate a synthetic ensemble.
    Generate,
    /// Import an external ensemble described by a manifest.
    Import {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Validate the ensemble and fit normalization statistics.
    Preprocess,
    /// Train the base level of each family.
    Train(FamilyArgs),
    /// Train correction levels up to --levels.
    Stack(FamilyArgs),
    /// Roll out every level and record timings.
    Rollout {
        #[command(flatten)]
        families: FamilyArgs,
        /// Roll out training simulations too.
        #[arg(long)]
        all: bool,
    },
    /// Per-step metric curves and plots.
    Eval(FamilyArgs),
    /// Porosity and permeability series.
    Bulk(FamilyArgs),
    /// Collate a summary report.
    Report,
}

#[derive(Args)]
struct FamilyArgs {
    /// Restrict to these families (default: those in the config).
    #[arg(long = "family")]
    family: Vec<String>,
}

fn families(ws: &Workspace, args: &FamilyArgs) -> Result<Vec<Family>> {
    if args.family.is_empty() {
        return Ok(ws.config.families.clone());
    }
    args.family
        .iter()
        .map(|f| Family::parse(f).map_err(|e| CliError::new(Category::Usage, e.to_string())))
        .collect()
}

fn open(g: &Global) -> Result<Workspace> {
    let mut ws = Workspace::open(&g.dir, g.config.as_deref())?;
    let cfg = &mut ws.config;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Ok(d) = std::env::var(DEVICE_ENV) {
        cfg.device = Device::parse(&d)?;
    }
    if let Some(d) = &g.device {
        cfg.device = Device::parse(d)?;
    }
    if let Some(f) = g.features {
        cfg.features = f;
    }
    if let Some(l) = g.levels {
        cfg.levels = l;
    }
    cfg.validate()?;
    Ok(ws)
}

fn run(cli: Cli) -> Result<String> {
    let ws = open(&cli.global)?;
    let _lock = Lock::acquire(&ws.root)?;
    let force = cli.global.force;
    let levels = ws.config.levels;
    match &cli.command {
        Command::Init => {
            write_output(&ws.config_path(), ws.config.to_toml()?.as_bytes(), force)?;
            Ok(format!("wrote {}", ws.config_path().display()))
        }
        Command::Generate => commands::cmd_generate(&ws, force),
        Command::Import { manifest } => commands::cmd_import(&ws, manifest, force),
        Command::Preprocess => commands::cmd_preprocess(&ws, force),
        Command::Train(a) => commands::cmd_train(&ws, &families(&ws, a)?, force),
        Command::Stack(a) => commands::cmd_stack(&ws, &families(&ws, a)?, levels, force),
        Command::Rollout { families: a, all } => commands::cmd_rollout(&ws, &families(&ws, a)?, levels, *all, force),
        Command::Eval(a) => commands::cmd_eval(&ws, &families(&ws, a)?, force),
        Command::Bulk(a) => commands::cmd_bulk(&ws, &families(&ws, a)?, force),
        Command::Report => commands::cmd_report(&ws, force),
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("error: {}", e.message);
    eprintln!("{}", e.to_json());
    ExitCode::from(e.category.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return fail(&CliError::new(Category::Usage, e.kind().to_string()));
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
