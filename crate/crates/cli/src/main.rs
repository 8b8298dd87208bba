use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pddsparse::config::{Phase, RunConfig};
use pddsparse::pipeline::run_pipeline;
use pddsparse::problem::ProblemRegistry;
use pddsparse::scheduler::PoolConfig;
use pddsparse::verify::{run_suite, SUITES};

#[derive(Parser)]
#[command(name = "pddsparse", version, about = "Sparse interfacial domain decomposition for 2-D elliptic BVPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Last phase to run: I, II, III or all.
        #[arg(long)]
        phase: Option<Phase>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for artifacts.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a named verification suite, or `all`.
    Verify {
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
}

fn run(cli: Cli) -> pddsparse::Result<bool> {
    match cli.command {
        Command::Run {
            config,
            phase,
            workers,
            seed,
            out,
        } => {
            let mut cfg = RunConfig::load(&config)
                .map_err(|e| pddsparse::Error::Config(format!("{}: {e}", config.display())))?;
            if let Some(p) = phase {
                cfg.run.phase = p;
            }
            if let Some(w) = workers {
                cfg.run.workers = w;
            }
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            if out.is_some() {
                cfg.run.output = out;
            }
            let result = run_pipeline(&cfg, &ProblemRegistry::with_builtins())?;
            let mut stdout = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut stdout, &result.metrics)?;
            writeln!(stdout)?;
            if let Some(dir) = &cfg.run.output {
                eprintln!("artifacts written to {}", dir.display());
            }
            Ok(true)
        }
        Command::Verify { suite, workers } => {
            let pool = PoolConfig::with_workers(workers);
            let names: Vec<&str> = if suite == "all" { SUITES.to_vec() } else { vec![suite.as_str()] };
            let mut ok = true;
            for name in names {
                for check in run_suite(name, &pool)? {
                    ok &= check.passed;
                    println!("[{name}] {check}");
                }
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
