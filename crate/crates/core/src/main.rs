use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use voluntary_el::estimators::{EstimatorKind, PipelineOptions, WRule};
use voluntary_el::population::{CsvSchema, Scenario};
use voluntary_el::sim::{
    estimate_file, run_coverage, run_monte_carlo, CoverageTarget, McConfig, OutputFormat,
};
use voluntary_el::smoothing::Sigma2Rule;
use voluntary_el::{EstimationError, Result};

#[derive(Parser)]
#[command(
    name = "voluntary-el",
    version,
    about = "Mean estimation from voluntary samples"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo bias, variance and MSE table.
    Simulate(SimArgs),
    /// Interval coverage of the benchmarked EL estimator.
    Coverage(SimArgs),
    /// Estimate the mean from a CSV file.
    Estimate(EstimateArgs),
}

#[derive(Args)]
struct SimArgs {
    /// TOML file with `McConfig` keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long = "n")]
    n_units: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated, e.g. `full,el-mar,ps,el1,el2,rps-opt`.
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<EstimatorKind>>,
    #[arg(long)]
    ci_level: Option<f64>,
    /// `finite-population` or `superpopulation`.
    #[arg(long)]
    coverage_target: Option<CoverageTarget>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    format: Option<OutputFormat>,
}

impl SimArgs {
    fn config(&self) -> Result<McConfig> {
        let mut cfg = match &self.config {
            Some(p) => McConfig::from_toml_file(p)?,
            None => McConfig::default(),
        };
        macro_rules! set {
            ($($f:ident => $g:ident),*) => {$(
                if let Some(v) = self.$f.clone() {
                    cfg.$g = v;
                }
            )*};
        }
        set!(scenario => scenario, n_units => n_units, reps => replications, seed => seed,
             estimators => estimators, ci_level => ci_level, coverage_target => coverage_target,
             workers => workers, format => format);
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EstimateArgs {
    /// Input CSV with a header row.
    path: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "ps,el1,el2")]
    estimators: Vec<EstimatorKind>,
    #[arg(long, default_value_t = 0.95)]
    ci_level: f64,
    #[arg(long, default_value = "delta")]
    delta_column: String,
    #[arg(long, default_value = "y")]
    y_column: String,
    /// Auxiliary columns; defaults to every other column.
    #[arg(long, value_delimiter = ',')]
    x_columns: Option<Vec<String>>,
    /// Use `n/N` as the bias-calibration target.
    #[arg(long)]
    ht_target: bool,
    /// Estimate the smoothing variance from respondent residuals instead of fixing it at 1.
    #[arg(long)]
    residual_sigma2: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: OutputFormat,
}

fn emit(text: &str, out: Option<&PathBuf>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => {
            let cfg = args.config()?;
            let summary = run_monte_carlo(&cfg)?;
            emit(&summary.render(cfg.format), cfg.out.as_ref())
        }
        Command::Coverage(args) => {
            let cfg = args.config()?;
            let report = run_coverage(&cfg)?;
            emit(&report.render(cfg.format), cfg.out.as_ref())
        }
        Command::Estimate(args) => {
            if !(0.0..1.0).contains(&args.ci_level) {
                return Err(EstimationError::InvalidInput(format!(
                    "ci_level must lie in [0, 1), got {}",
                    args.ci_level
                )));
            }
            let schema = CsvSchema {
                delta: args.delta_column,
                y: args.y_column,
                x: args.x_columns,
            };
            let opts = PipelineOptions {
                w_rule: if args.ht_target {
                    WRule::HorvitzThompson
                } else {
                    WRule::PopulationMean
                },
                sigma2: if args.residual_sigma2 {
                    Sigma2Rule::ResidualVariance
                } else {
                    Sigma2Rule::default()
                },
                ..PipelineOptions::default()
            };
            let est = estimate_file(&args.path, &schema, &args.estimators, &opts, args.ci_level)?;
            emit(&est.render(args.format), args.out.as_ref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
