use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use butterfly_cli::{load_config, plan, run_with_threads, CliError, ExperimentConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bfly", version, about = "Butterfly network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the experiment named by the config's "experiment" field.
    Run(CommonArgs),
    /// JL distortion failure rates of the FJLT butterfly.
    JlCheck(CommonArgs),
    /// Success rate of the two-sided FJLT approximation of a dense matrix.
    Prop1(CommonArgs),
    /// Encoder-decoder butterfly k-sweep against PCA.
    Autoencode(CommonArgs),
    /// Two-phase training over a list of seeds.
    TwoPhase(CommonArgs),
    /// Critical-point structure of trained (D, E) for fixed B.
    VerifyCritical(CommonArgs),
    /// Learned versus random sketches for low-rank approximation.
    SketchTrain(CommonArgs),
    /// Write synthetic matrices.
    GenData(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON config; required for `run`, optional otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: out/<experiment>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads [default: all cores].
    #[arg(long)]
    threads: Option<usize>,
    /// Validate the config and print the resolved plan.
    #[arg(long)]
    dry_run: bool,
}

fn resolve(expected: Option<&str>, args: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match (&args.config, expected) {
        (Some(path), _) => load_config(path)?,
        (None, Some(name)) => ExperimentConfig::default_for(name)?,
        (None, None) => return Err(CliError::Config("run needs --config".into())),
    };
    if let Some(name) = expected {
        if cfg.name() != name {
            return Err(CliError::Config(format!(
                "config describes experiment {:?}, not {name:?}",
                cfg.name()
            )));
        }
    }
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(expected: Option<&str>, args: &CommonArgs) -> Result<(), CliError> {
    let cfg = resolve(expected, args)?;
    if args.dry_run {
        let p = plan(&cfg)?;
        // A closed stdout (e.g. piped into `head`) is not an error.
        let _ = writeln!(
            std::io::stdout(),
            "{}",
            serde_json::to_string_pretty(&p).expect("plan serializes")
        );
        return Ok(());
    }
    let out_dir = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("out").join(cfg.name()));
    let output = run_with_threads(&cfg, args.threads)?;
    output.write_to(&out_dir)?;
    eprintln!("wrote {}", out_dir.join("summary.json").display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (expected, args) = match &cli.command {
        Command::Run(a) => (None, a),
        Command::JlCheck(a) => (Some("jl_check"), a),
        Command::Prop1(a) => (Some("prop1"), a),
        Command::Autoencode(a) => (Some("autoencode"), a),
        Command::TwoPhase(a) => (Some("two_phase"), a),
        Command::VerifyCritical(a) => (Some("verify_critical"), a),
        Command::SketchTrain(a) => (Some("sketch_train"), a),
        Command::GenData(a) => (Some("gen_data"), a),
    };
    match execute(expected, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
