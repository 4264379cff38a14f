use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use polya_urn::harness::{
    emit_plotdata, load_report, run, ExperimentConfig, ExperimentKind, Format, HarnessError,
    Overrides,
};

#[derive(Parser)]
#[command(name = "polya", version, about = "Polya urn experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Direct urn simulation and scaled-statistic summaries.
    Simulate(RunArgs),
    /// Samples of the Gaussian strong-approximation right-hand side.
    Approximate(RunArgs),
    /// Urn paths against one of the three limit regimes.
    VerifyRegime(RunArgs),
    /// Normal-approximation distance over an (N, n) grid.
    RateScan(RunArgs),
    /// Empirical composition frequencies against the exact law.
    OracleCheck(RunArgs),
    /// Long-format CSV from a finished run directory.
    EmitPlotdata {
        /// Run directory holding report.json.
        run_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_ACCEPTANCE: u8 = 3;

fn run_experiment(kind: ExperimentKind, args: RunArgs) -> Result<ExitCode, HarnessError> {
    let mut config = ExperimentConfig::load(&args.config)?;
    config.apply(&Overrides {
        kind: Some(kind),
        seed: args.seed,
        replicates: args.replicates,
        threads: args.threads,
        out: args.out,
        format: args.format.map(|f| match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        }),
    })?;
    let report = run(&config)?;
    if config.output.dir.is_none() {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("report serializes")
        );
    }
    if let Some(rt) = &report.runtime {
        eprintln!("done in {:.2}s on {} threads", rt.wall_seconds, rt.threads);
    }
    Ok(match report.passed() {
        Some(false) => {
            eprintln!("acceptance check failed");
            ExitCode::from(EXIT_ACCEPTANCE)
        }
        _ => ExitCode::SUCCESS,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => run_experiment(ExperimentKind::Simulate, a),
        Command::Approximate(a) => run_experiment(ExperimentKind::Approximate, a),
        Command::VerifyRegime(a) => run_experiment(ExperimentKind::VerifyRegime, a),
        Command::RateScan(a) => run_experiment(ExperimentKind::RateScan, a),
        Command::OracleCheck(a) => run_experiment(ExperimentKind::OracleCheck, a),
        Command::EmitPlotdata { run_dir, out } => load_report(&run_dir)
            .and_then(|r| emit_plotdata(&r, &out))
            .map(|paths| {
                for p in paths {
                    println!("{}", p.display());
                }
                ExitCode::SUCCESS
            }),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                HarnessError::Config { .. } | HarnessError::Model(_) => ExitCode::from(EXIT_CONFIG),
                HarnessError::Io { .. } => ExitCode::FAILURE,
            }
        }
    }
}
