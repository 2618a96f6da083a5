//! Command-line front end: train, eval, reconstruct, bench.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pprl::envs::{EnvConfig, Task};
use pprl::harness::{
    bench, bench_csv, evaluate, init_threads, load_run_checkpoint, reconstruct_file, train, AgentPolicy, Kernel,
    OraclePolicy, Policy, RandomPolicy, RunConfig,
};
use pprl::Error;

#[derive(Parser)]
#[command(name = "pprl", version, about = "Point-patch transformer RL on synthetic point-cloud tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Agent,
    Oracle,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    PointReach,
    ColorTouch,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run of this config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or a scripted baseline) with bootstrap intervals.
    Eval {
        #[arg(long, required_if_eq("policy", "agent"))]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "agent")]
        policy: Baseline,
        /// Task for baselines without a checkpoint.
        #[arg(long, value_enum, default_value = "point-reach")]
        task: TaskArg,
    },
    /// Masked reconstruction of a point-cloud file.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time a geometry kernel over cloud sizes.
    Bench {
        #[arg(long)]
        kernel: String,
        /// Comma-separated point counts.
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
    },
}

fn run(cli: Cli) -> pprl::Result<()> {
    match cli.command {
        Command::Train { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let summary = train(&cfg, resume.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
        }
        Command::Eval { checkpoint, episodes, seed, policy, task } => {
            let loaded = checkpoint.as_deref().map(load_run_checkpoint).transpose()?;
            let env = match &loaded {
                Some((_, cfg, _)) => cfg.env.clone(),
                None => EnvConfig::for_task(match task {
                    TaskArg::PointReach => Task::PointReach,
                    TaskArg::ColorTouch => Task::ColorTouch,
                }),
            };
            let agent_policy;
            let p: &dyn Policy = match policy {
                Baseline::Agent => {
                    let Some((agent, _, _)) = loaded.as_ref() else {
                        return Err(Error::InvalidArgument("--policy agent needs --checkpoint".into()));
                    };
                    agent_policy = AgentPolicy(agent);
                    &agent_policy
                }
                Baseline::Oracle => &OraclePolicy,
                Baseline::Random => &RandomPolicy,
            };
            let summary = evaluate(p, &env, episodes, seed)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
        }
        Command::Reconstruct { checkpoint, cloud, out, seed } => {
            let report = reconstruct_file(&checkpoint, &cloud, &out, seed)?;
            println!("patch,chamfer,color");
            for p in &report.patches {
                let color = p.color.map(|c| c.to_string()).unwrap_or_default();
                println!("{},{},{}", p.index, p.chamfer, color);
            }
            println!("mean,{},{}", report.mean_chamfer, report.mean_color.map(|c| c.to_string()).unwrap_or_default());
        }
        Command::Bench { kernel, sizes } => {
            let kernel: Kernel = kernel.parse()?;
            print!("{}", bench_csv(&bench(kernel, &sizes)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("PPRL_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = init_threads(n) {
                    eprintln!("error: {e}");
                    return ExitCode::from(3);
                }
            }
            _ => {
                eprintln!("error: PPRL_THREADS must be a positive integer, got '{v}'");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidArgument(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
