//! Experiment driver: every subcommand reads a plain-text key=value config,
//! runs one pipeline stage, writes its outputs plus a run manifest into the
//! output directory, and is fully determined by (config, seed).

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::Path;
use stegolab_core::error::{Error, Result};
use stegolab_core::kv::KvFile;

pub use manifest::RunManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    TrainCodec,
    TrainDdpm,
    TrainGan,
    SelectDdim,
    SelectGan,
    Analyze,
    PayloadSweep,
    Robustness,
    Steganalyze,
    Report,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainCodec => "train-codec",
            Stage::TrainDdpm => "train-ddpm",
            Stage::TrainGan => "train-gan",
            Stage::SelectDdim => "select-ddim",
            Stage::SelectGan => "select-gan",
            Stage::Analyze => "analyze",
            Stage::PayloadSweep => "payload-sweep",
            Stage::Robustness => "robustness",
            Stage::Steganalyze => "steganalyze",
            Stage::Report => "report",
        }
    }

    pub fn parse(name: &str) -> Result<Stage> {
        Ok(match name {
            "gen-data" => Stage::GenData,
            "train-codec" => Stage::TrainCodec,
            "train-ddpm" => Stage::TrainDdpm,
            "train-gan" => Stage::TrainGan,
            "select-ddim" => Stage::SelectDdim,
            "select-gan" => Stage::SelectGan,
            "analyze" => Stage::Analyze,
            "payload-sweep" => Stage::PayloadSweep,
            "robustness" => Stage::Robustness,
            "steganalyze" => Stage::Steganalyze,
            "report" => Stage::Report,
            other => return Err(Error::invalid(format!("unknown subcommand {other:?}"))),
        })
    }
}

/// Execute one stage. `seed_override` takes precedence over the config's
/// seed key; outputs land in `out_dir` (created if missing).
pub fn run_experiment(
    stage: Stage,
    config_path: &Path,
    seed_override: Option<u64>,
    out_dir: &Path,
) -> Result<RunManifest> {
    // An unreadable or malformed config is a config error (exit 1), not a
    // runtime abort.
    let kv = KvFile::load(config_path)
        .map_err(|e| Error::invalid(format!("config {}: {e}", config_path.display())))?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let started = std::time::Instant::now();
    let mut manifest = match stage {
        Stage::GenData => commands::gen_data(&kv, seed_override, out_dir)?,
        Stage::TrainCodec => commands::train_codec(&kv, seed_override, out_dir)?,
        Stage::TrainDdpm => commands::train_ddpm(&kv, seed_override, out_dir)?,
        Stage::TrainGan => commands::train_gan(&kv, seed_override, out_dir)?,
        Stage::SelectDdim => commands::select_ddim(&kv, seed_override, out_dir)?,
        Stage::SelectGan => commands::select_gan(&kv, seed_override, out_dir)?,
        Stage::Analyze => commands::analyze(&kv, seed_override, out_dir)?,
        Stage::PayloadSweep => commands::payload_sweep(&kv, seed_override, out_dir)?,
        Stage::Robustness => commands::robustness(&kv, seed_override, out_dir)?,
        Stage::Steganalyze => commands::steganalyze(&kv, seed_override, out_dir)?,
        Stage::Report => commands::report(&kv, seed_override, out_dir)?,
    };
    manifest.record_timing("stage_seconds", started.elapsed().as_secs_f64());
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// Exit code mapping: config/format problems are 1, runtime aborts are 2.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::Format { .. } => 1,
        _ => 2,
    }
}
