use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod output;

use output::Output;

#[derive(Parser, Debug)]
#[command(name = "impact-duality", version, about = "Super-replication under transient price impact on scenario trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check depth and resilience against the model's standing assumptions.
    Validate(Inputs),
    /// Terminal cash of a strategy by direct execution and by decomposition.
    Wealth(Inputs),
    /// Primal super-replication price.
    Price(Inputs),
    /// Primal price, best dual certificate and the gap between them.
    Gap(Inputs),
    /// Feasibility and objective of a dual certificate.
    DualEval(Inputs),
    /// Dual ascent from a certificate (or the running-maximum default).
    DualSearch(Inputs),
    /// Closed-form call price and the buy-and-hold identity.
    Call(Inputs),
    /// Zero-drift tilt of P + g to a martingale.
    Tilt(Inputs),
    /// Shadow-price check of a liquidating strategy.
    ShadowCheck(Inputs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Args, Debug, Clone)]
pub struct Inputs {
    /// Market file: grid, depth, resilience and impact parameters.
    #[arg(long)]
    pub market: PathBuf,
    /// Tree file; without it a single path or fan is read from --prices.
    #[arg(long)]
    pub tree: Option<PathBuf>,
    /// CSV of price paths, one column per scenario.
    #[arg(long)]
    pub prices: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<PathBuf>,
    #[arg(long)]
    pub certificate: Option<PathBuf>,
    /// `call:K`, `const:C`, `zero`, or a JSON file keyed by leaf id.
    #[arg(long, default_value = "zero")]
    pub payoff: String,
    /// Absolute tolerance of the primal solver.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Step of the exhaustive trade grid used to cross-check `price`.
    #[arg(long)]
    pub trade_grid: Option<f64>,
    /// Half-width of the exhaustive trade grid.
    #[arg(long, default_value_t = 2.0)]
    pub trade_range: f64,
    /// Recorded in reports; every command is deterministic.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fail when the strategy does not end flat.
    #[arg(long)]
    pub require_liquidation: bool,
    /// Call strike.
    #[arg(long, default_value_t = 0.0)]
    pub strike: f64,
    /// Tilt per grid point, comma separated (default zero).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub g: Option<Vec<f64>>,
    /// Threshold for the reported tail probability.
    #[arg(long, default_value_t = 0.0)]
    pub eps: f64,
    /// `exp:A`, `power:P` or `log`.
    #[arg(long, default_value = "exp:1")]
    pub utility: String,
    /// JSON array of candidate shadow martingale values in file order.
    #[arg(long)]
    pub martingale: Option<PathBuf>,
}

/// A failure with its exit code: 1 domain, 2 input, 3 non-convergence.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
    /// Report to emit despite the failure.
    pub output: Option<Output>,
}

impl Failure {
    pub fn input(e: impl std::fmt::Display) -> Self {
        Self { code: 2, message: e.to_string(), output: None }
    }

    pub fn domain(e: impl std::fmt::Display) -> Self {
        Self { code: 1, message: e.to_string(), output: None }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, inputs) = match &cli.command {
        Command::Validate(i) => ("validate", i),
        Command::Wealth(i) => ("wealth", i),
        Command::Price(i) => ("price", i),
        Command::Gap(i) => ("gap", i),
        Command::DualEval(i) => ("dual-eval", i),
        Command::DualSearch(i) => ("dual-search", i),
        Command::Call(i) => ("call", i),
        Command::Tilt(i) => ("tilt", i),
        Command::ShadowCheck(i) => ("shadow-check", i),
    };
    let result = commands::run(name, inputs);
    let (output, code, message) = match result {
        Ok(out) => (Some(out), 0, None),
        Err(f) => (f.output, f.code, Some(f.message)),
    };
    if let Some(out) = output {
        if let Err(e) = out.emit(name, inputs) {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    if let Some(m) = message {
        eprintln!("error: {m}");
    }
    ExitCode::from(code)
}
