//! Shared fixtures for the benchmarks.

use gummp::data::{Example, Limits, SyntheticTaskSpec};
use gummp::experiment::{new_trainer, prepare_for_inference, synthetic_split};
use gummp::model::PreparedExample;
use gummp::training::Trainer;
use gummp::{Ablation, ExperimentConfig, ModelConfig, TrainConfig};

pub struct Fixture {
    pub trainer: Trainer,
    pub train: Vec<Example>,
    pub prepared: Vec<PreparedExample>,
}

/// Untrained desk-scale model over the synthetic task.
pub fn fixture(ablation: Ablation) -> Fixture {
    let spec = SyntheticTaskSpec {
        examples: 40,
        ..Default::default()
    };
    let model = ModelConfig {
        max_passage_len: spec.passage_len,
        ablation,
        ..ModelConfig::desk()
    };
    let (train, _) = synthetic_split(&spec, 32, &Limits::from(&model)).expect("synthetic task");
    let cfg = ExperimentConfig {
        model,
        train: TrainConfig {
            batch_size: 8,
            ..Default::default()
        },
    };
    let trainer = new_trainer(&cfg, &train).expect("trainer");
    let prepared = prepare_for_inference(&trainer.model, &train, 1).expect("prepared");
    Fixture {
        trainer,
        train,
        prepared,
    }
}
