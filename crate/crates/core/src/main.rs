use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use vanet_hfl::sim::{
    compare_arms, parse_summary, run_experiment, run_grid, write_grid, write_run, ExperimentConfig, GridSpec,
};

/// Secure hierarchical federated learning over a simulated vehicular network.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single experiment.
    Run(RunArgs),
    /// Sweep the attack grid over all four arms.
    Grid(GridArgs),
    /// Trend report from one or more summary.csv files.
    Compare {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults are used for anything it leaves out.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long, default_value = "out")]
    out: PathBuf,
    /// Override the master seed.
    #[arg(short, long)]
    seed: Option<u64>,
    /// Override the number of rounds.
    #[arg(long)]
    rounds: Option<u32>,
    /// Also write mobility, cluster and security traces.
    #[arg(long)]
    traces: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    common: Common,
    /// Noise means to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = GridSpec::default().means)]
    means: Vec<f64>,
    /// Noise variances to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = GridSpec::default().vars)]
    vars: Vec<f64>,
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(rounds) = common.rounds {
        config.max_rounds = rounds;
    }
    config.validate()?;
    Ok(config)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match cli.command {
        Command::Run(args) => {
            let config = load(&args.common)?;
            let result = run_experiment(&config)?;
            write_run(&result, &args.common.out, args.common.traces)
                .with_context(|| format!("writing to {}", args.common.out.display()))?;
            for c in &result.convergence {
                println!("{} eps {}: converged round {}", config.arm_label(), c.epsilon, c.render());
            }
            println!("final accuracy {:.4}", result.final_accuracy());
            let d = &result.detection;
            if !d.first_attack.is_empty() {
                let latency = d.block_latency();
                let blocked = latency.values().filter(|l| l.is_some()).count();
                let worst = latency.values().flatten().max().map_or("-".to_string(), |l| l.to_string());
                println!(
                    "attackers delivering poison: {}, blocked: {blocked}, worst block latency: {worst} rounds",
                    latency.len()
                );
            }
            println!(
                "benign false flags: {}/{} ({:.2}%)",
                d.benign_flags,
                d.benign_tests,
                100.0 * d.false_flag_rate()
            );
        }
        Command::Grid(args) => {
            let config = load(&args.common)?;
            let spec = GridSpec {
                means: args.means,
                vars: args.vars,
            };
            let grid = run_grid(&config, &spec)?;
            write_grid(&grid, &args.common.out, args.common.traces)
                .with_context(|| format!("writing to {}", args.common.out.display()))?;
            println!("{}", compare_arms(&grid.summary));
        }
        Command::Compare { summaries } => {
            let mut rows = Vec::new();
            for path in &summaries {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                rows.extend(parse_summary(&text).with_context(|| format!("parsing {}", path.display()))?);
            }
            println!("{}", compare_arms(&rows));
        }
    }
    Ok(())
}
