use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rwlab_cli::commands::{self, LinGapRequest, PhaseOverrides, SelfCheckRequest, TrainRequest};
use rwlab_cli::{exit, CliError, CliResult, ExperimentConfig, Mode};
use rwlab_core::analysis::{Prop1Config, Prop1Distribution};
use rwlab_core::net::Activation;

/// Meta-reweighting experiments on synthetic noisy-label data.
///
/// Outputs go to a fresh run directory under $RWLAB_OUT_DIR (default
/// `runs/`). Exit codes: 0 success, 1 usage or config error, 2 numeric
/// divergence, 3 I/O error.
#[derive(Debug, Parser)]
#[command(name = "rwlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a clustered dataset with label noise and a clean subset.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train with one of the reweighting schemes and write trace CSVs.
    Train(TrainArgs),
    /// Analyze traces or run the scaling experiments.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// Run the randomized correctness oracles.
    SelfCheck {
        /// Random instances for the hypergradient and centering checks.
        #[arg(long, default_value_t = 50)]
        instances: usize,
        /// Random rows for the row-shift check.
        #[arg(long, default_value_t = 1000)]
        rows: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum, required_unless_present = "replay")]
    mode: Option<Mode>,
    #[arg(long, required_unless_present = "replay")]
    config: Option<PathBuf>,
    /// Dataset in `.rlab` format.
    #[arg(long, required_unless_present = "replay")]
    data: Option<PathBuf>,
    /// Check the exact hypergradient against finite differences before
    /// the first epoch (meta modes).
    #[arg(long)]
    self_check: bool,
    /// Re-run the training recorded in a manifest.
    #[arg(long, conflicts_with_all = ["mode", "config", "data", "self_check"])]
    replay: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DistributionArg {
    Gaussian,
    Tangent,
}

#[derive(Debug, Subcommand)]
enum AnalyzeCommand {
    /// Detect the training phases in a meta run.
    Phases {
        /// Run directory holding trace.csv and val_trace.csv.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        kappa: Option<f64>,
    },
    /// Monte-Carlo scaling of the clean-subset kernel statistics.
    Prop1 {
        #[arg(long, value_enum, default_value_t = DistributionArg::Gaussian)]
        distribution: DistributionArg,
        /// Feature dimension (gaussian) or input dimension (tangent).
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 1)]
        depth: usize,
        #[arg(long, value_delimiter = ',', default_value = "64,256,1024")]
        m_grid: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        replicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Gap between a network and its linearization across widths.
    Lingap {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "128,512,2048")]
        widths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        depth: usize,
        #[arg(long, default_value_t = Activation::Tanh)]
        activation: Activation,
        #[arg(long, default_value_t = 0.01)]
        eta: f64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        probes: usize,
        /// Leading training examples to fit.
        #[arg(long, default_value_t = 64)]
        train_size: usize,
    },
    /// Write the six figure-panel CSVs for a training run.
    Figures {
        #[arg(long)]
        run: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<PathBuf> {
    match cli.command {
        Command::GenData { config } => commands::gen_data(&config),
        Command::Train(args) => {
            let req = match args.replay {
                Some(manifest) => TrainRequest::from_manifest(&manifest)?,
                None => TrainRequest {
                    mode: args.mode.expect("required by clap"),
                    config: ExperimentConfig::load(&args.config.expect("required by clap"))?,
                    data: args.data.expect("required by clap"),
                    self_check: args.self_check,
                    expected_sha256: None,
                },
            };
            commands::train(&req)
        }
        Command::Analyze { what } => match what {
            AnalyzeCommand::Phases { run, m, beta, gamma, width, eta, kappa } => {
                commands::analyze_phases(&run, &PhaseOverrides { m, beta, gamma, width, eta, kappa })
            }
            AnalyzeCommand::Prop1 { distribution, dim, width, depth, m_grid, replicates, seed } => {
                let distribution = match distribution {
                    DistributionArg::Gaussian => Prop1Distribution::Gaussian { dim },
                    DistributionArg::Tangent => Prop1Distribution::TangentAtInit { input_dim: dim, width, depth },
                };
                commands::analyze_prop1(&Prop1Config { distribution, m_grid, replicates, seed })
            }
            AnalyzeCommand::Lingap { data, widths, seeds, depth, activation, eta, steps, probes, train_size } => {
                commands::analyze_lingap(&LinGapRequest {
                    data,
                    widths,
                    seeds,
                    depth,
                    activation,
                    eta,
                    steps,
                    probes,
                    train_size,
                })
            }
            AnalyzeCommand::Figures { run } => commands::analyze_figures(&run),
        },
        Command::SelfCheck { instances, rows, seed } => {
            commands::self_check(&SelfCheckRequest { instances, rows, seed })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(dir) => {
            println!("run_dir {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            report_code(&e)
        }
    }
}

fn report_code(e: &CliError) -> ExitCode {
    ExitCode::from(e.exit_code() as u8)
}
