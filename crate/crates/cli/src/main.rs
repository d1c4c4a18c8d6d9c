use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use tgr_cli::stages::Workspace;
use tgr_cli::{config, output_dir, run, Stage};

/// Data-free meta-learning pipeline over a pool of pre-trained models.
#[derive(Debug, Parser)]
#[command(name = "tgr", version)]
struct Args {
    #[arg(value_enum)]
    stage: Stage,
    #[arg(long)]
    config: PathBuf,
    /// `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let result = config::load(&args.config, &args.overrides, args.seed).and_then(|cfg| {
        let env = std::env::var_os("TGR_OUTPUT_DIR").map(PathBuf::from);
        let ws = Workspace::new(output_dir(args.output.clone(), env, &cfg))?;
        run(args.stage, &cfg, &ws)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
