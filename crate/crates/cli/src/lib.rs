//! Configuration, stage orchestration and figures for the `tgr` pipeline.

pub mod config;
pub mod error;
pub mod plot;
pub mod stages;

use std::path::PathBuf;

use config::RunConfig;
use error::CliResult;
use stages::Workspace;

/// Pipeline stages in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    ZooBuild,
    Invert,
    Embed,
    Group,
    Train,
    Eval,
    Ag,
    Plot,
    /// Every stage except `ag`, in order.
    All,
}

/// Output directory precedence: flag, then environment, then config.
pub fn output_dir(flag: Option<PathBuf>, env: Option<PathBuf>, config: &RunConfig) -> PathBuf {
    flag.or(env)
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("tgr-out"))
}

/// Run one stage, echoing the resolved configuration first.
pub fn run(stage: Stage, config: &RunConfig, ws: &Workspace) -> CliResult<()> {
    tgr_core::io::write_atomic(&ws.path("config.resolved.toml"), config.to_toml().as_bytes())?;
    match stage {
        Stage::ZooBuild => stages::zoo_build(config, ws).map(drop),
        Stage::Invert => stages::invert(config, ws).map(drop),
        Stage::Embed => stages::embed(config, ws).map(drop),
        Stage::Group => stages::group(config, ws).map(drop),
        Stage::Train => stages::train_stage(config, ws).map(drop),
        Stage::Eval => stages::eval_stage(config, ws).map(drop),
        Stage::Ag => stages::ag_stage(config, ws).map(drop),
        Stage::Plot => plot::plot(ws).map(drop),
        Stage::All => {
            stages::zoo_build(config, ws)?;
            stages::invert(config, ws)?;
            stages::embed(config, ws)?;
            stages::group(config, ws)?;
            stages::train_stage(config, ws)?;
            stages::eval_stage(config, ws)?;
            plot::plot(ws).map(drop)
        }
    }
}
