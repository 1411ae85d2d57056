//! Config-driven stage runs over an on-disk dataset, shared by the CLI and
//! the Python bindings. Artifacts live under `RunConfig::out`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::dataio::DatasetManifest;
use crate::error::{Error, Result};
use crate::eval::{load_windows, run_experiment, write_report, EvalReport, Split};
use crate::training::{run_stage, Checkpoint, RunOptions};

pub fn checkpoint_path(cfg: &RunConfig, stage: u8) -> PathBuf {
    cfg.out.join(format!("stage{stage}.ckpt"))
}

pub fn metrics_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("metrics.jsonl")
}

/// Loads a prerequisite checkpoint; a missing file is a stage-order error.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::StageOrder(format!("checkpoint {} not found", path.display())));
    }
    Checkpoint::load(path)
}

/// Runs one stage on the training split and saves `stage{n}.ckpt`.
///
/// With `resume`, an existing checkpoint of the same stage is continued;
/// otherwise the previous stage's checkpoint is the starting point (Stage 1
/// and from-scratch Stage 3 start from fresh weights).
pub fn train(cfg: &RunConfig, stage: u8, resume: bool) -> Result<Checkpoint> {
    if !(1..=3).contains(&stage) {
        return Err(Error::Config(format!("stage {stage} is not 1, 2 or 3")));
    }
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let own = checkpoint_path(cfg, stage);
    let init = if resume && own.is_file() {
        Some(load_checkpoint(&own)?)
    } else if stage == 1 || (stage == 3 && cfg.stage3.from_scratch) {
        None
    } else {
        Some(load_checkpoint(&checkpoint_path(cfg, stage - 1))?)
    };
    let manifest = DatasetManifest::scan(&cfg.data_root()?)?;
    let split = Split::build(cfg.protocol, &manifest, cfg.seed)?;
    let windows = load_windows(&manifest, &split.train, cfg.model.input_size)?;
    log::info!("stage {stage}: {} training windows under {}", windows.len(), cfg.protocol);
    let opts = RunOptions {
        checkpoint: Some(own.clone()),
        metrics: Some(metrics_path(cfg)),
        halt_after: None,
        split: Some(split.tag(&manifest)),
    };
    let ck = run_stage(cfg.stage(stage), &cfg.masking, &cfg.model, &windows, init.as_ref(), &opts)?;
    ck.save(&own)?;
    Ok(ck)
}

/// Evaluates the Stage 3 checkpoint and writes the report files.
pub fn evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    let ck = load_checkpoint(&checkpoint_path(cfg, 3))?;
    let manifest = DatasetManifest::scan(&cfg.data_root()?)?;
    let report = run_experiment(cfg.protocol, &manifest, &ck, cfg.seed)?;
    write_report(&cfg.out, &report)?;
    Ok(report)
}
