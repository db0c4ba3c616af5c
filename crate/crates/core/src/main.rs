use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use avgopt::gradient::gradcheck_report;
use avgopt::harness::{
    eval_report, resolve_out_root, run_experiment, trap_analyze, AgentConfig, ExperimentConfig, ExperimentResult,
    SweepConfig,
};
use avgopt::learner::Mode;
use avgopt::mdp::TrapChainSpec;
use avgopt::Error;

#[derive(Parser)]
#[command(name = "avgopt", version, about = "Average-reward hierarchical option-critic experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ar,
    Dr,
}

#[derive(clap::Args)]
struct RunFlags {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// First seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; falls back to the config, then $AVGOPT_OUT, then ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    /// Run only agents of this kind.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Discount of the discounted agent.
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the configured agents over all seeds.
    Train(RunFlags),
    /// Compare the exact gradient with finite differences on random instances.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Print the JSON report instead of the table.
        #[arg(long)]
        json: bool,
        /// Also write gradcheck.json into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Discounted and average-reward values of the committed trap-chain policies.
    TrapAnalyze {
        /// Discount to analyse (repeatable); defaults to the probe set.
        #[arg(long)]
        gamma: Vec<f64>,
        #[arg(long)]
        json: bool,
    },
    /// Exact value tables for the configured environment and hierarchy.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// final_params.json of a run; zero parameters when absent.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Run an experiment for every point of a hyperparameter grid.
    Sweep(RunFlags),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::InvalidSchedule(_)
        | Error::InvalidDiscount(_)
        | Error::InvalidGrid(_)
        | Error::InvalidMdp(_)
        | Error::InvalidHierarchy(_)
        | Error::InvalidIndex(_)
        | Error::DimensionMismatch(_)
        | Error::Json(_) => 2,
        _ => 1,
    }
}

fn load_config(path: Option<&Path>) -> avgopt::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn apply_flags(config: &mut ExperimentConfig, flags: &RunFlags) -> avgopt::Result<()> {
    if let Some(seed) = flags.seed {
        config.learner.seed = seed;
    }
    if let Some(steps) = flags.steps {
        config.learner.total_steps = steps;
    }
    match flags.mode {
        Some(ModeArg::Ar) => {
            if flags.gamma.is_some() {
                return Err(Error::Config("--gamma applies only to the discounted agent".into()));
            }
            config.agents.retain(|a| a.mode == Mode::AverageReward);
            if config.agents.is_empty() {
                config.agents.push(AgentConfig {
                    mode: Mode::AverageReward,
                    schedule: None,
                });
            }
        }
        Some(ModeArg::Dr) => {
            config.agents.retain(|a| a.mode != Mode::AverageReward);
            if config.agents.is_empty() {
                config.agents.push(AgentConfig {
                    mode: Mode::Discounted { gamma: 0.9 },
                    schedule: None,
                });
            }
        }
        None => {}
    }
    if let Some(gamma) = flags.gamma {
        let mut any = false;
        for a in &mut config.agents {
            if let Mode::Discounted { gamma: g } = &mut a.mode {
                *g = gamma;
                any = true;
            }
        }
        if !any {
            return Err(Error::Config("--gamma given but no discounted agent is configured".into()));
        }
    }
    config.validate()
}

fn print_result(result: &ExperimentResult) {
    println!("artifacts: {}", result.dir.display());
    for a in &result.agents {
        let reward = a
            .mean_final_cycle_reward
            .map_or("n/a".to_string(), |r| format!("{r:.4}"));
        println!(
            "{:>3}: final reward per cycle {reward}, modal route {}, {} seeds ok, {} failed",
            a.agent,
            a.modal_route.as_deref().unwrap_or("n/a"),
            a.seeds.len(),
            a.failures.len()
        );
    }
}

fn run(cli: Cli) -> avgopt::Result<()> {
    match cli.command {
        Cmd::Train(flags) => {
            let mut config = load_config(flags.config.as_deref())?;
            apply_flags(&mut config, &flags)?;
            let root = resolve_out_root(flags.out.as_deref(), config.out.as_deref());
            let result = run_experiment(&config, &root)?;
            print_result(&result);
        }
        Cmd::Gradcheck {
            instances,
            seed,
            json,
            out,
        } => {
            let report = gradcheck_report(instances, seed)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("gradcheck.json"), report.to_json()?)?;
            }
            if json {
                println!("{}", report.to_json()?);
            } else {
                print!("{}", report.to_table());
            }
            if !report.passed {
                return Err(Error::Config("gradient check failed".into()));
            }
        }
        Cmd::TrapAnalyze { gamma, json } => {
            let spec = TrapChainSpec::default();
            let gammas = if gamma.is_empty() { spec.discount_probe_set.clone() } else { gamma };
            let report = trap_analyze(&spec, &gammas)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.to_table());
            }
        }
        Cmd::Eval { config, params } => {
            let config = load_config(config.as_deref())?;
            let tables = eval_report(&config, params.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&tables)?);
        }
        Cmd::Sweep(flags) => {
            let path = flags
                .config
                .as_deref()
                .ok_or_else(|| Error::Config("sweep needs --config <sweep.json>".into()))?;
            let sweep = SweepConfig::load(path)?;
            for (assignment, mut config) in sweep.expand()? {
                apply_flags(&mut config, &flags)?;
                let root = resolve_out_root(flags.out.as_deref(), config.out.as_deref());
                println!("{}: {}", config.name, serde_json::to_string(&assignment)?);
                print_result(&run_experiment(&config, &root)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
