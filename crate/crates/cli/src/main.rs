use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use comm_cli::report::cmd_report;
use comm_cli::{cmd_dump_world, cmd_pretrain, cmd_run, exit_code, Config, RunOverrides};
use comm_core::runner::{EvalModes, Method};
use comm_core::synth::Scenario;

#[derive(Parser)]
#[command(name = "comm", version, about = "Multimodal continual learning experiments on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the frozen two-tower backbone and save a checkpoint.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train over a task stream and write accuracy matrices and metrics.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        scenario: Option<Scenario>,
        #[arg(long)]
        reversed: bool,
        #[arg(long)]
        eval_mode: Option<EvalModes>,
        /// Repeat for several runs.
        #[arg(long)]
        seed: Vec<u64>,
        /// Components to drop, e.g. `no-cross,no-self`. Repeat for several
        /// variants; `none` keeps everything.
        #[arg(long)]
        ablate: Vec<String>,
        /// Parent directory of the run directories.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare finished runs and export FAA-over-time plot data.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write the synthetic world and its task stream to files.
    DumpWorld {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "world")]
        out: PathBuf,
    },
}

fn load(path: Option<&PathBuf>) -> anyhow::Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain { config, seed } => {
            let mut cfg = load(config.as_ref())?;
            if let Some(s) = seed {
                cfg.backbone.seed = s;
            }
            let done = cmd_pretrain(&cfg)?;
            println!("checkpoint {}", done.checkpoint.display());
            println!("digest {}", done.digest);
            println!(
                "held-out retrieval {:.4} (required >= {:.2})",
                done.retrieval, cfg.backbone.pretrain.min_retrieval
            );
        }
        Command::Run {
            config,
            method,
            scenario,
            reversed,
            eval_mode,
            seed,
            ablate,
            out,
            jobs,
        } => {
            let cfg = load(config.as_ref())?;
            let o = RunOverrides {
                method,
                scenario,
                reversed,
                eval_mode,
                seeds: seed,
                ablations: ablate,
                out,
                jobs,
            };
            for dir in cmd_run(&cfg, &o)? {
                println!("{}", dir.display());
            }
        }
        Command::Report { runs, out } => {
            let r = cmd_report(&runs, &out)?;
            print!("{}", r.table);
            for d in &r.skipped {
                eprintln!("skipped unfinished run {}", d.display());
            }
            println!("plot data {}", r.plot_data.display());
        }
        Command::DumpWorld { config, out } => {
            let cfg = load(config.as_ref())?;
            for f in cmd_dump_world(&cfg, &out)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
