mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "segnas", version, about = "Template-based architecture search for compact segmentation networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML file with [space], [controller], [ppo], [surrogate], [search] and [evaluator] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `surrogate` or `external:CMD ARGS...`
    #[arg(long)]
    evaluator: Option<String>,
    /// Seeds controller init, sampling and surrogate noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Evaluation threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Report {
    Rewards,
    Strides,
    Templates,
    Params,
    Spearman,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the controller and log every sampled architecture.
    Search {
        #[arg(long)]
        budget: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate architectures drawn uniformly from the search space.
    Random {
        #[arg(long)]
        count: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Validate a genotype file and print its summary.
    Decode {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compile a genotype and print its per-layer cost report.
    Inspect {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long, num_args = 2, value_names = ["H", "W"])]
        input_hw: Option<Vec<u64>>,
        /// Emit the cost report as JSON.
        #[arg(long)]
        json: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the compiled graph in Graphviz DOT format.
    ExportDot {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Summarize a search log (or, for `spearman`, a rerank result).
    Analyze {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, value_enum)]
        report: Report,
        /// Ignore architectures below this reward (0 keeps all).
        #[arg(long, default_value_t = segnas::analysis::DEFAULT_MIN_REWARD)]
        min_reward: f64,
        /// Architectures per time window.
        #[arg(long, default_value_t = 100)]
        window: usize,
        /// Parameter bucket width for the `params` report.
        #[arg(long, default_value_t = segnas::analysis::DEFAULT_PARAM_BUCKET)]
        bucket: u64,
        /// Templates listed by the `templates` report.
        #[arg(long, default_value_t = 5)]
        top: usize,
        /// Emit JSON instead of text tables.
        #[arg(long)]
        json: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Re-score the best architectures of a log under the short and long
    /// surrogate setups and report their rank correlation.
    Rerank {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut stdout = std::io::stdout().lock();
    let out = &mut stdout;
    match cli.command {
        Command::Search { budget, run } => commands::search(out, &run, budget),
        Command::Random { count, run } => commands::random(out, &run, count),
        Command::Decode { genotype, config } => commands::decode(out, &genotype, config.as_deref()),
        Command::Inspect { genotype, input_hw, json, config } => {
            let hw = input_hw.map(|v| (v[0], v[1]));
            commands::inspect(out, &genotype, hw, config.as_deref(), json)
        }
        Command::ExportDot { genotype, out: dot, config } => {
            commands::export_dot(out, &genotype, &dot, config.as_deref())
        }
        Command::Analyze { log, report, min_reward, window, bucket, top, json, config } => {
            let opts = commands::AnalyzeOptions {
                min_reward: (min_reward > 0.0).then_some(min_reward),
                window,
                bucket,
                top,
                json,
            };
            commands::analyze(out, &log, report, &opts, config.as_deref())
        }
        Command::Rerank { log, count, out: dest, config, seed } => {
            commands::rerank(out, &log, count, &dest, config.as_deref(), seed)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
