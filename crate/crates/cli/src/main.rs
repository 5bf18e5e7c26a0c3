use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};

use pixelfool::oracle::Scenario;
use pixelfool_cli::commands;
use pixelfool_cli::RunConfig;

/// Reinforcement-learning pixel-evasion attacks on an image classifier.
#[derive(Parser)]
#[command(name = "pixelfool", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults are used for anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus and train the target classifier.
    TrainClassifier {
        #[command(flatten)]
        common: Common,
    },
    /// Train a PPO attacker against the saved classifier.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = scenario_parser())]
        scenario: Option<Scenario>,
        /// Collect rollouts on one thread (reproducible byte for byte).
        #[arg(long)]
        serial: bool,
        #[arg(long)]
        total_steps: Option<u64>,
    },
    /// Per-class metrics and best-scenario table from episode logs.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        threshold: Option<f64>,
        /// Episode logs; defaults to every episodes_*.jsonl in the output directory.
        logs: Vec<PathBuf>,
    },
    /// Running-LSR curves from episode logs.
    PlotData {
        #[command(flatten)]
        common: Common,
        logs: Vec<PathBuf>,
    },
}

fn scenario_parser() -> impl TypedValueParser<Value = Scenario> {
    PossibleValuesParser::new(Scenario::ALL.map(|s| s.name())).map(|name| {
        name.parse::<Scenario>()
            .expect("possible values are scenario names")
    })
}

fn load(common: &Common) -> anyhow::Result<(RunConfig, PathBuf)> {
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainClassifier { common } => {
            let (cfg, out) = load(&common)?;
            commands::cmd_train_classifier(&cfg, &out)?;
        }
        Command::Attack {
            common,
            scenario,
            serial,
            total_steps,
        } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(s) = scenario {
                cfg.scenario = s;
            }
            if let Some(n) = total_steps {
                cfg.ppo.total_env_steps = n;
            }
            cfg.validate()?;
            let mut stdout = std::io::stdout().lock();
            commands::cmd_attack(&cfg, &out, !serial, &mut stdout)?;
        }
        Command::Analyze {
            common,
            threshold,
            logs,
        } => {
            let (cfg, out) = load(&common)?;
            let logs = commands::resolve_logs(&logs, &out)?;
            commands::cmd_analyze(&logs, threshold.unwrap_or(cfg.analysis.threshold), &out)?;
        }
        Command::PlotData { common, logs } => {
            let (_, out) = load(&common)?;
            let logs = commands::resolve_logs(&logs, &out)?;
            commands::cmd_plot_data(&logs, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
