use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ionfv::config::{load_config, Mode, RunConfig};
use ionfv::experiment::{run_experiment, RunContext};
use ionfv::Error;
use log::error;

#[derive(Parser)]
#[command(name = "ionfv", version, about = "Finite-volume drift-diffusion experiments driven by TOML configs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Transient run, eta sweep or Keller-Segel run.
    Solve(RunArgs),
    /// Convolution timing.
    Bench(RunArgs),
    /// Spatial or temporal convergence study.
    Converge(RunArgs),
    /// Singular versus regularized kernel comparison.
    CompareReg(RunArgs),
    /// Validate a config and print its canonical form.
    Check {
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Output directory; defaults to output.dir or out/<config stem>.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Maximum number of concurrent runs in sweeps and studies.
    #[arg(long)]
    threads: Option<usize>,
    /// Steps between snapshot files (0: first and last only).
    #[arg(long)]
    snapshot_stride: Option<usize>,
    /// Only print warnings and errors.
    #[arg(long)]
    quiet: bool,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_SOLVER: u8 = 3;
const EXIT_IO: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::NotIntegrable(_) => EXIT_CONFIG,
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_SOLVER,
    }
}

fn accepts(command: &str, mode: Mode) -> bool {
    match command {
        "solve" => matches!(mode, Mode::Transient | Mode::EtaSweep | Mode::KellerSegel),
        "bench" => mode == Mode::Benchmark,
        "converge" => matches!(mode, Mode::ConvergenceSpace | Mode::ConvergenceTime),
        "compare-reg" => mode == Mode::RegularizationCompare,
        _ => false,
    }
}

fn default_out_dir(cfg: &RunConfig, path: &Path) -> PathBuf {
    if let Some(dir) = cfg.output.as_ref().and_then(|o| o.dir.as_ref()) {
        return PathBuf::from(dir);
    }
    let stem = path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    PathBuf::from("out").join(stem)
}

fn run(command: &str, args: RunArgs) -> Result<(), Error> {
    let cfg = load_config(&args.config)?;
    if !accepts(command, cfg.mode()) {
        return Err(Error::Config(format!(
            "mode {} cannot be run with `{command}`",
            cfg.mode().name()
        )));
    }
    let threads = args
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let ctx = RunContext {
        out_dir: args.out_dir.clone().unwrap_or_else(|| default_out_dir(&cfg, &args.config)),
        threads,
        snapshot_stride: args.snapshot_stride,
    };
    let report = run_experiment(&cfg, &ctx)?;
    if !args.quiet {
        for (k, v) in &report.summary {
            println!("{k}={v}");
        }
        println!("out_dir={}", ctx.out_dir.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = match &cli.command {
        Command::Solve(a) | Command::Bench(a) | Command::Converge(a) | Command::CompareReg(a) => a.quiet,
        Command::Check { .. } => false,
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if quiet { "warn" } else { "info" }))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Solve(a) => run("solve", a),
        Command::Bench(a) => run("bench", a),
        Command::Converge(a) => run("converge", a),
        Command::CompareReg(a) => run("compare-reg", a),
        Command::Check { config } => load_config(&config).and_then(|cfg| {
            print!("{}", cfg.to_canonical()?);
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
