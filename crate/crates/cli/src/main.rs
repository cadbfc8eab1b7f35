use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

use commands::CliError;

#[derive(Parser)]
#[command(name = "rio", version, about = "Radar-inertial odometry: simulate, train, run, ablate, evaluate and plot")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum VariantArg {
    Full,
    Icp,
    Cv,
    RadarRemoved,
}

impl From<VariantArg> for rio::pipeline::Variant {
    fn from(v: VariantArg) -> Self {
        use rio::pipeline::Variant;
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::Icp => Variant::Icp,
            VariantArg::Cv => Variant::Cv,
            VariantArg::RadarRemoved => Variant::RadarRemoved,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset (scans, IMU, ground truth) from the scenario.
    Simulate(Common),
    /// Train the LSTM motion model.
    Train(Common),
    /// Run the odometry pipeline.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "full")]
        variant: VariantArg,
        /// Write the similarity matrix and matches of every frame.
        #[arg(long)]
        dump_debug: bool,
    },
    /// Run full, icp and cv on the same data and compare them.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Render SVG plots for a run directory.
    Plot {
        run_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Absolute trajectory error of an estimate against ground truth.
    Eval {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Largest timestamp gap accepted when pairing poses (s).
        #[arg(long, default_value_t = rio::eval::DEFAULT_MAX_GAP)]
        max_gap: f64,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(c) => commands::simulate(&commands::setup(c.config, c.seed, c.out)?),
        Command::Train(c) => commands::train(&commands::setup(c.config, c.seed, c.out)?),
        Command::Run { common: c, variant, dump_debug } => {
            commands::run(&commands::setup(c.config, c.seed, c.out)?, variant.into(), dump_debug)
        }
        Command::Ablate { common: c } => commands::ablate(&commands::setup(c.config, c.seed, c.out)?),
        Command::Plot { run_dir, out } => commands::plot(&run_dir, out.as_deref().unwrap_or(&run_dir)),
        Command::Eval { estimate, truth, out, max_gap } => commands::eval(&estimate, &truth, out.as_deref(), max_gap),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
