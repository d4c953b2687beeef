use std::process::ExitCode;

use clap::{Parser, Subcommand};

use detach::cli::{self, ConfigArgs, DEFAULT_THRESHOLDS};
use detach::envs::EnvKind;
use detach::Error;

#[derive(Parser)]
#[command(
    name = "detach",
    about = "Distributed rollout collection with divergence-triggered weight sync"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the head and its workers to the step budget
    Run(ConfigArgs),
    /// Repeat a run for several KL thresholds with a shared seed
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated thresholds
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
    },
    /// Worker process for the TCP transport
    Worker {
        /// Head address, host:port
        #[arg(long)]
        connect: String,
        #[arg(long = "worker-id")]
        worker_id: u32,
        /// Must match the head's environment
        #[arg(long)]
        env: String,
        #[arg(long = "envs-per-worker")]
        envs_per_worker: usize,
        /// Root seed of the run; the worker derives its own stream from it
        #[arg(long)]
        seed: u64,
    },
}

fn with_worker_exe(mut config: cli::RunConfig) -> cli::RunConfig {
    config.worker_exe = std::env::current_exe().ok();
    config
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Run(args) => {
            let config = with_worker_exe(args.resolve()?);
            let s = cli::run(&config)?;
            println!(
                "steps {} updates {} episodes {} mean-100 return {} syncs {:?} weight bytes {}",
                s.global_steps,
                s.updates,
                s.episodes,
                s.final_mean_return
                    .map_or("n/a".into(), |r| format!("{r:.2}")),
                s.sync_counts,
                s.weight_bytes
            );
            println!("metrics written to {}", config.metrics_path.display());
        }
        Command::Sweep { config, thresholds } => {
            let config = with_worker_exe(config.resolve()?);
            let thresholds = thresholds.unwrap_or_else(|| DEFAULT_THRESHOLDS.to_vec());
            let rows = cli::sweep(&config, &thresholds)?;
            println!("kl_threshold  mean-100 return  syncs  weight bytes");
            for r in &rows {
                println!(
                    "{:>12}  {:>15}  {:>5}  {:>12}",
                    r.kl_threshold,
                    r.final_mean_return
                        .map_or("n/a".into(), |v| format!("{v:.2}")),
                    r.total_syncs,
                    r.weight_bytes
                );
            }
            let (_, table) = cli::sweep_paths(&config.metrics_path, &thresholds);
            println!("summary written to {}", table.display());
        }
        Command::Worker {
            connect,
            worker_id,
            env,
            envs_per_worker,
            seed,
        } => {
            let env: EnvKind = env.parse()?;
            cli::run_worker_process(&connect, worker_id, env, envs_per_worker, seed)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
