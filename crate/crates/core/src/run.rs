//! Whole-run plumbing shared by the command line and the acceptance suite.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{synth_generate, Dataset, SynthOracle};
use crate::embedder::{make_fixed_embedder, EmbedderConfig, EmbedderSource, FixedEmbedder};
use crate::error::Result;
use crate::evaluation::{evaluate_synthetic, GroupReport};
use crate::tensor::Element;
use crate::training::{embedder_from_checkpoint, train, LossRecord, TrainState, Trainer};

pub fn load_embedder<E: Element>(source: &EmbedderSource, config: &EmbedderConfig) -> Result<FixedEmbedder<E>> {
    match source {
        EmbedderSource::Fixed(seed) => Ok(make_fixed_embedder(*seed, config.clone())),
        EmbedderSource::File(path) => embedder_from_checkpoint(&Checkpoint::load(path)?),
    }
}

/// Fresh trainer for `cfg` over `data`.
pub fn build_trainer<E: Element>(cfg: &RunConfig, data: &Dataset) -> Result<Trainer<E>> {
    cfg.validate()?;
    let embedder = load_embedder(&cfg.embedder, &cfg.embedder_config)?;
    let state = TrainState::new(&cfg.train, cfg.generator.clone(), cfg.discriminator.clone(), embedder)?;
    Trainer::new(cfg.train.clone(), state, data)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub variant: String,
    pub seed: u64,
    pub iterations: u64,
    /// Wall time for synthesis, training and evaluation.
    pub seconds: f64,
    pub report: GroupReport,
}

/// Synthesizes the data, trains, and evaluates the target group against the
/// oracles. With `out`, logs and checkpoints land under it.
pub fn synthetic_experiment(cfg: &RunConfig, out: Option<&Path>) -> Result<(ExperimentReport, Vec<LossRecord>)> {
    let t0 = Instant::now();
    let (data, oracle): (Dataset, SynthOracle) = synth_generate(&cfg.synth)?;
    let mut trainer = build_trainer::<f32>(cfg, &data)?;
    let records = train(&mut trainer, &data, out, &serde_json::to_value(cfg)?)?;
    let report = evaluate_synthetic(
        &trainer.state.generator,
        &data,
        &oracle,
        cfg.train.target_group,
        cfg.eval.threshold,
        cfg.eval.max_samples,
    )?;
    Ok((
        ExperimentReport {
            variant: cfg.variant.to_string(),
            seed: cfg.train.seed,
            iterations: trainer.state.step,
            seconds: t0.elapsed().as_secs_f64(),
            report,
        },
        records,
    ))
}
