mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "pointsea",
    version,
    about = "Point cloud completion with self-structure augmentation"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// Built-in profile: pcn, snet55 or tiny-test
    #[arg(long, global = true)]
    profile: Option<String>,

    /// `key = value` profile overrides; flags win over the file
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Single profile override, repeatable (e.g. `--set channels=32`)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Worker threads; 0 picks one per core
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render depth maps of a cloud (DMB1 plus PGM previews)
    Project(commands::ProjectArgs),
    /// Complete a partial cloud
    Complete(commands::CompleteArgs),
    /// Crop a ground-truth cloud from one of the eight test viewpoints
    Protocol(commands::ProtocolArgs),
    /// Compare predictions against ground truth
    Eval(commands::EvalArgs),
    /// Run every built-in invariant and oracle check
    Selfcheck,
    /// Write freshly initialized weights for the profile
    InitWeights(commands::InitArgs),
    /// Gradient descent of a random cloud onto a sphere
    FitDemo(commands::FitArgs),
    /// Print the resolved profile as a config file
    ShowProfile,
    /// Validate and summarize a PCB1, DMB1 or PSW1 file (or a text cloud)
    Inspect { file: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.global.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(4);
        }
    };
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| pool.install(|| run(&cli))));
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
        Err(_) => ExitCode::from(4),
    }
}

fn run(cli: &Cli) -> Result<(), commands::CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::Project(a) => commands::project(g, a),
        Command::Complete(a) => commands::complete(g, a),
        Command::Protocol(a) => commands::protocol(a),
        Command::Eval(a) => commands::eval(a),
        Command::Selfcheck => commands::selfcheck(),
        Command::InitWeights(a) => commands::init_weights(g, a),
        Command::FitDemo(a) => commands::fit_demo(a),
        Command::Inspect { file } => commands::inspect(file),
        Command::ShowProfile => {
            print!("{}", commands::resolve_profile(g)?.to_config());
            Ok(())
        }
    }
}
