//! The toy fixture: a synthetic general/task pair and a model trained on both.

use std::fs;
use std::path::Path;

use serde::Serialize;
use taskprune::calibration::TokenCorpus;
use taskprune::format::{write_corpus, write_model};
use taskprune::model::{Model, Nonlinearity};
use taskprune::synthetic::{generate_task_pair, SyntheticTaskPair};
use taskprune::taskaware::ChannelGroup;
use taskprune::train::{train_model, TrainConfig, TrainReport};

use crate::error::{CliError, CliResult, FileExt, StageExt};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixtureParams {
    pub seed: u64,
    pub overlap: f64,
    pub channels: usize,
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub lr: f64,
}

impl Default for FixtureParams {
    fn default() -> Self {
        Self { seed: 0, overlap: 0.5, channels: 32, hidden: vec![64, 64], steps: 600, lr: 0.2 }
    }
}

pub struct Fixture {
    pub params: FixtureParams,
    pub pair: SyntheticTaskPair,
    pub model: Model,
    pub train: TrainReport,
}

/// File names written by [`write_fixture`].
pub const MODEL_FILE: &str = "model.tpm";
pub const GENERAL_TRAIN: &str = "general_train.jsonl";
pub const TASK_TRAIN: &str = "task_train.jsonl";
pub const GENERAL_VALID: &str = "general_valid.jsonl";
pub const TASK_VALID: &str = "task_valid.jsonl";
pub const GENERAL_EVAL: &str = "general_eval.jsonl";
pub const TASK_EVAL: &str = "task_eval.jsonl";

/// Generates the pair and trains a RELU model on the union of both training
/// corpora, with the planted embedding frozen.
pub fn build_fixture(params: &FixtureParams) -> CliResult<Fixture> {
    let pair = generate_task_pair(params.seed, params.overlap, params.channels).stage("fixture")?;
    let init = pair.planted_model(&params.hidden, Nonlinearity::Relu, params.seed).stage("fixture")?;
    let cfg =
        TrainConfig { steps: params.steps, lr: params.lr, batch_size: 64, train_embedding: false, seed: params.seed };
    let (model, train) = train_model(&init, &pair.combined_train(), &cfg).stage("train")?;
    Ok(Fixture { params: params.clone(), pair, model, train })
}

#[derive(Serialize)]
struct FixtureMeta<'a> {
    params: &'a FixtureParams,
    vocab_size: usize,
    planted_gap: f64,
    planted: &'a [ChannelGroup],
    final_loss: f64,
    final_grad_norm: f64,
}

pub fn write_fixture(dir: &Path, f: &Fixture) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(MODEL_FILE);
    write_model(&path, &f.model).file("write", &path)?;
    let corpora: [(&str, &TokenCorpus); 6] = [
        (GENERAL_TRAIN, &f.pair.general_train),
        (TASK_TRAIN, &f.pair.task_train),
        (GENERAL_VALID, &f.pair.general_valid),
        (TASK_VALID, &f.pair.task_valid),
        (GENERAL_EVAL, &f.pair.general_eval),
        (TASK_EVAL, &f.pair.task_eval),
    ];
    for (name, corpus) in corpora {
        let path = dir.join(name);
        write_corpus(&path, corpus).file("write", &path)?;
    }
    let meta = FixtureMeta {
        params: &f.params,
        vocab_size: f.pair.vocab_size(),
        planted_gap: f.pair.planted_gap,
        planted: &f.pair.planted,
        final_loss: f.train.final_loss,
        final_grad_norm: f.train.final_grad_norm,
    };
    let path = dir.join("fixture.json");
    let json = serde_json::to_string_pretty(&meta).expect("fixture metadata serializes");
    fs::write(&path, json + "\n").map_err(|e| CliError::io(&path, e))
}
