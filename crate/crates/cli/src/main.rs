mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::RunDir;
use config::ExperimentConfig;

/// Number of worker threads; unset means one per core.
const THREADS_ENV: &str = "HEMOFLOW_THREADS";

#[derive(Parser)]
#[command(name = "hemoflow", version, about = "Physics-informed flow surrogates for vessel geometries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file (key = value with [section] headers).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides experiment.seeds with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    output: PathBuf,
    /// Name of the run directory below the output directory.
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample and label one point cloud per configured velocity.
    Generate(Common),
    Train(Common),
    /// Re-evaluate a trained run against its test split.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    Ablate(Common),
    SplitStudy(Common),
    Transfer {
        #[command(flatten)]
        common: Common,
        /// Checkpoint of the baseline; trained from scratch when omitted.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    ExportField {
        #[arg(long)]
        run: PathBuf,
        /// csv or vtk; defaults to experiment.export_format.
        #[arg(long)]
        format: Option<String>,
    },
    /// Validate an external point-cloud CSV and store it as a data file.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
}

fn setup(common: &Common, command: &str) -> Result<(ExperimentConfig, RunDir, u64)> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    let seed = cfg.seeds[0];
    let run_id = common.run_id.clone().unwrap_or_else(|| format!("{command}-{}-s{seed}", cfg.train.kind));
    let dir = RunDir::create(&common.output, &run_id)?;
    Ok((cfg, dir, seed))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let (cfg, dir, seed) = setup(&c, "generate")?;
            commands::generate(&cfg, &dir, seed)?;
            println!("{}", dir.root.display());
        }
        Command::Train(c) => {
            let (cfg, dir, seed) = setup(&c, "train")?;
            commands::train(&cfg, &dir, seed)?;
            println!("{}", dir.root.display());
        }
        Command::Eval { run } => commands::eval(&run)?,
        Command::Ablate(c) => {
            let (cfg, dir, _) = setup(&c, "ablate")?;
            commands::ablate(&cfg, &dir)?;
            println!("{}", dir.root.display());
        }
        Command::SplitStudy(c) => {
            let (cfg, dir, seed) = setup(&c, "split-study")?;
            commands::split_study_cmd(&cfg, &dir, seed)?;
            println!("{}", dir.root.display());
        }
        Command::Transfer { common, baseline } => {
            let (cfg, dir, seed) = setup(&common, "transfer")?;
            commands::transfer(&cfg, &dir, seed, baseline.as_deref())?;
            println!("{}", dir.root.display());
        }
        Command::ExportField { run, format } => {
            let path = commands::export(&run, format.as_deref())?;
            println!("{}", path.display());
        }
        Command::Ingest { common, input } => {
            let (cfg, dir, _) = setup(&common, "ingest")?;
            let path = commands::ingest(&cfg, &dir, &input)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn json_string(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Error category and exit code for the machine-readable error line.
fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    use hemoflow::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Config(_)) => ("config", 2),
        Some(E::Usage(_)) => ("usage", 2),
        Some(E::Parse { .. }) => ("parse", 3),
        Some(E::Validation(_)) => ("validation", 3),
        Some(E::DegenerateScenario(_)) => ("degenerate-scenario", 3),
        Some(E::Checkpoint(_)) => ("checkpoint", 4),
        Some(E::Diverged { .. }) => ("diverged", 5),
        Some(E::Io(_)) | Some(E::Csv(_)) => ("io", 6),
        Some(_) => ("internal", 1),
        None if err.downcast_ref::<std::io::Error>().is_some() => ("io", 6),
        // configuration-file problems are raised as plain messages
        None => ("config", 2),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|s| s.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (kind, code) = classify(&err);
            eprintln!("{{\"error\":{},\"message\":{}}}", json_string(kind), json_string(&format!("{err:#}")));
            ExitCode::from(code)
        }
    }
}
