use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use silt::error::SiltError;
use silt::harness::{self, RunConfig};

#[derive(Parser)]
#[command(name = "silt", version, about = "Self-intersection local time simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write results.jsonl, summary.csv, meta.txt.
    Run {
        /// Experiment name (see list-experiments).
        #[arg(long)]
        experiment: Option<String>,
        /// Config file ([run] and [params] sections); flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Replica count (overrides the replicas parameter).
        #[arg(long)]
        replicas: Option<u64>,
        /// Worker threads.
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Drift-trace mode where relevant: paper or liouville.
        #[arg(long)]
        mode: Option<String>,
        /// Parameter overrides, key=value (repeatable).
        #[arg(long = "param", value_name = "KEY=VALUE")]
        params: Vec<String>,
    },
    /// Print the experiment registry with parameter schemas.
    ListExperiments {
        /// Emit machine-readable JSON.
        #[arg(long)]
        json: bool,
    },
}

fn exit_code_for(err: &SiltError, unknown_experiment: bool) -> u8 {
    if unknown_experiment {
        return 2;
    }
    match err {
        SiltError::Io(_) => 3,
        SiltError::Input(_) => 4,
        SiltError::Numerical(_) | SiltError::Budget(_) => 5,
    }
}

fn run_command(cmd: Command) -> Result<(), (SiltError, bool)> {
    match cmd {
        Command::ListExperiments { json } => {
            if json {
                println!("{}", harness::list_experiments_json());
            } else {
                print!("{}", harness::list_experiments_text());
            }
            Ok(())
        }
        Command::Run { experiment, config, seed, replicas, workers, out, mode, params } => {
            let mut cfg = match &config {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| (SiltError::Io(e), false))?;
                    RunConfig::from_toml(&text).map_err(|e| (e, false))?
                }
                None => RunConfig::default(),
            };
            if let Some(name) = experiment {
                cfg.experiment = name;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(w) = workers {
                cfg.workers = w.max(1);
            }
            if let Some(o) = out {
                cfg.out = Some(o);
            }
            if let Some(r) = replicas {
                cfg.params
                    .0
                    .insert("replicas".into(), silt::experiments::ParamValue::Int(r as i64));
            }
            if let Some(m) = mode {
                cfg.params.0.insert("mode".into(), silt::experiments::ParamValue::Str(m));
            }
            for p in &params {
                let (key, value) = harness::parse_param_override(p).map_err(|e| (e, false))?;
                cfg.params.0.insert(key, value);
            }
            if cfg.experiment.is_empty() {
                return Err((
                    SiltError::input("no experiment given (use --experiment or a config file)"),
                    false,
                ));
            }
            // distinguish the unknown-experiment exit code up front
            if let Err(e) = silt::experiments::find_experiment(&cfg.experiment) {
                return Err((e, true));
            }
            let output = harness::run(&cfg).map_err(|e| (e, false))?;
            eprintln!(
                "{}: {} records, config {}, {} ms",
                cfg.experiment,
                output.records.len(),
                output.config_hash,
                output.wall_ms
            );
            for path in &output.written {
                eprintln!("wrote {}", path.display());
            }
            if cfg.out.is_none() {
                for record in &output.records {
                    println!("{}", serde_json::to_string(record).expect("record serialize"));
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_command(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err((err, unknown)) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err, unknown))
        }
    }
}
