use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use diffmask_cli::{out_root, read_config, resolve, run, Command};

#[derive(Parser)]
#[command(name = "diffmask", version, about = "Learn and evaluate k-space sampling masks with a diffusion prior")]
struct Cli {
    /// Seed for every random stream of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory holding run directories (default: $DIFFMASK_OUT, then ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run directory name (default: the subcommand and seed).
    #[arg(long, global = true)]
    name: Option<String>,
    #[command(subcommand)]
    command: Command,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = out_root(cli.out);
    let result = match cli.command {
        Command::Replay(args) => read_config(&args.config).and_then(|mut cfg| {
            let name = cli.name.unwrap_or_else(|| format!("replay-{}-{}", cfg.command.name(), cfg.seed));
            cfg.out_dir = root.join(name);
            run(&cfg)
        }),
        command => {
            let name = cli.name.unwrap_or_else(|| format!("{}-{}", command.name(), cli.seed));
            resolve(command, cli.seed, root.join(name)).and_then(|cfg| run(&cfg))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
