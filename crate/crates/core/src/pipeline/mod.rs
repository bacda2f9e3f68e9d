//! Stage orchestration over versioned artifacts in one output directory.
//!
//! Every stage reads its inputs from the output directory and writes its
//! results back, so running the stages one by one produces exactly the
//! files of a monolithic [`run_pipeline`] call.

pub mod artifacts;
mod config;
mod stages;

use std::path::Path;

use serde::Serialize;

pub use config::{
    Backend, CoarseConfig, DataConfig, DataSource, DimSelection, EmbedConfig, PipelineConfig,
    RetrievalConfig, SelectConfig, StageSeeds, SynthConfig, TemplateConfig, VotingConfig,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    TrainCoarse,
    Prune,
    Select,
    Embed,
    Cluster,
    Score,
    Evaluate,
    Retrieve,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Synth,
        Stage::TrainCoarse,
        Stage::Prune,
        Stage::Select,
        Stage::Embed,
        Stage::Cluster,
        Stage::Score,
        Stage::Evaluate,
        Stage::Retrieve,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::TrainCoarse => "train-coarse",
            Stage::Prune => "prune",
            Stage::Select => "select",
            Stage::Embed => "embed",
            Stage::Cluster => "cluster",
            Stage::Score => "score",
            Stage::Evaluate => "evaluate",
            Stage::Retrieve => "retrieve",
        }
    }
}

/// Runs one stage against `cfg.output`, then refreshes the run manifest.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<()> {
    let out = cfg.output.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let wrap = |e: Error| match e {
        e @ Error::Config(_) => e,
        e => Error::Stage {
            stage: stage.name(),
            source: Box::new(e),
        },
    };
    let result = match stage {
        Stage::Synth => stages::synth(cfg, out),
        Stage::TrainCoarse => stages::train_coarse(cfg, out),
        Stage::Prune => stages::prune(cfg, out),
        Stage::Select => stages::select(cfg, out),
        Stage::Embed => stages::embed(cfg, out),
        Stage::Cluster => stages::cluster(cfg, out),
        Stage::Score => stages::score(cfg, out),
        Stage::Evaluate => stages::evaluate(cfg, out),
        Stage::Retrieve => stages::retrieve(cfg, out),
    };
    result.map_err(wrap)?;
    write_manifest(cfg, out).map_err(wrap)
}

/// All stages in order.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<()> {
    for stage in Stage::ALL {
        run_stage(stage, cfg)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    crate_version: &'static str,
    config: &'a PipelineConfig,
    seeds: StageSeeds,
    artifacts: Vec<String>,
}

fn write_manifest(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let mut artifacts: Vec<String> = std::fs::read_dir(out)
        .map_err(|e| Error::io(out, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n != artifacts::MANIFEST)
        .collect();
    artifacts.sort();
    let manifest = Manifest {
        crate_version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        seeds: cfg.seeds(),
        artifacts,
    };
    artifacts::write_json(out, artifacts::MANIFEST, "ctf-manifest", &manifest)
}
