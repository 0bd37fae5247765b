use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vector_girsanov::experiments::{self, ConfigLayer, Scenario, ScenarioConfig};
use vector_girsanov::Error;

#[derive(Parser)]
#[command(
    name = "vgirsanov",
    version,
    about = "Change-of-measure experiments for vector measures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write summary.json plus CSV tables.
    Run(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// unit-oracles, scalar-girsanov, conditional-measure, prop41,
    /// drift-change or bi1star-convergence
    scenario: String,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long, conflicts_with = "r_spec", allow_hyphen_values = true)]
    q: Option<f64>,
    /// unit, zero, constant, linear or none
    #[arg(long)]
    r_spec: Option<String>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    confidence: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// L¹ slots of the conditional-measure scenario
    #[arg(long)]
    slots: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML file with the same keys; command-line values win
    #[arg(long)]
    config: Option<PathBuf>,
}

fn resolve(args: RunArgs) -> Result<ScenarioConfig, Error> {
    let scenario: Scenario = args.scenario.parse()?;
    let file = match &args.config {
        Some(p) => ConfigLayer::from_toml_file(p)?,
        None => ConfigLayer::default(),
    };
    let cli = ConfigLayer {
        scenario: Some(scenario),
        paths: args.paths,
        grid: args.grid,
        horizon: args.horizon,
        q: args.q,
        r_spec: args.r_spec,
        bins: args.bins,
        confidence: args.confidence,
        seed: args.seed,
        slots: args.slots,
        threads: args.threads,
        out: args.out,
    };
    ScenarioConfig::resolve(cli.over(file))
}

fn main() -> ExitCode {
    let Command::Run(args) = Cli::parse().command;
    let cfg = match resolve(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(experiments::exit_code_for(&e) as u8);
        }
    };
    if let Some(n) = cfg.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match experiments::run(&cfg) {
        Ok(outcome) => {
            let s = &outcome.summary;
            for st in &s.stages {
                println!(
                    "{:<5} {:<28} residual {:.3e}  tolerance {:.3e}  expected {:?}",
                    if st.pass { "PASS" } else { "FAIL" },
                    st.name,
                    st.worst_residual,
                    st.tolerance,
                    st.expected
                );
            }
            println!(
                "{} {}: {}",
                s.scenario,
                cfg.out.join("summary.json").display(),
                if s.pass { "pass" } else { "FAIL" }
            );
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(experiments::exit_code_for(&e) as u8)
        }
    }
}
