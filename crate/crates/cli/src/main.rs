use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use objdisc_cli::{cmd_eval, cmd_fuse, cmd_gen, cmd_infer, cmd_train, CliError, RunConfig};

/// Motion-guided object discovery on camera and LiDAR sequences.
///
/// Log verbosity follows OBJDISC_LOG (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "objdisc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// `key = value` config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides applied after the config file, in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(Common),
    /// Burn-in and cross-modal distillation.
    Train(Common),
    /// Write per-frame instance predictions.
    Infer(Common),
    /// Late-fuse 2D and 3D predictions.
    Fuse(Common),
    /// Score predictions against ground truth.
    Eval(Common),
}

fn load(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for s in &c.set {
        cfg.set(s)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(c) => {
            let n = cmd_gen(&load(&c)?)?.len();
            println!("generated {n} scenes");
        }
        Command::Train(c) => {
            let s = cmd_train(&load(&c)?)?;
            println!("step {}", s.step);
            for (name, sum) in objdisc::distill::CHECKPOINT_FILES.iter().zip(s.checksums) {
                println!("{name} {sum:016x}");
            }
        }
        Command::Infer(c) => println!("wrote {} predictions", cmd_infer(&load(&c)?)?),
        Command::Fuse(c) => println!("fused {} frames", cmd_fuse(&load(&c)?)?),
        Command::Eval(c) => print!("{}", cmd_eval(&load(&c)?)?.to_table()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OBJDISC_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("objdisc: usage: {}", msg.lines().next().unwrap_or("").trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("objdisc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
