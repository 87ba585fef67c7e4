use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flguard::config::{load_config, preset, PRESET_NAMES};
use flguard::{compare_dirs, run_to_dir, Mode, Result};

#[derive(Parser)]
#[command(name = "flguard", version, about = "Federated-learning simulator with negative-FL detection and recovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write a run directory.
    Run {
        /// TOML config; a preset is used instead when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// fedavg, detect_recover, all_time or short_term.
        #[arg(long)]
        mode: Option<Mode>,
        /// Named scenario, e.g. `nfl_default` or `vanilla_mix(0.5)`.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Compare two run directories.
    Compare { a: PathBuf, b: PathBuf },
    /// Preset operations.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    /// List preset names.
    List,
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            mode,
            preset: name,
            out,
            workers,
        } => {
            let mut cfg = match (config, name) {
                (Some(path), _) => load_config(&path)?,
                (None, Some(name)) => preset(&name)?,
                (None, None) => preset("nfl_default")?,
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(mode) = mode {
                cfg.mode = mode;
            }
            let run = run_to_dir(&cfg, workers, &out)?;
            let s = run.summary();
            let show = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
            println!(
                "{} rounds, mode {}: acc {} beta_true {} beta_guard {} reports {} cancels {} -> {}",
                s.rounds,
                cfg.mode,
                show(s.acc),
                show(s.beta_true),
                show(s.beta_guard),
                s.reports,
                s.cancels,
                out.display()
            );
        }
        Command::Compare { a, b } => print!("{}", compare_dirs(&a, &b)?.render()),
        Command::Presets { action: PresetAction::List } => {
            for name in PRESET_NAMES {
                println!("{name}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
