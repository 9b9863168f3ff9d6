#![allow(dead_code)]

use mmm::data::{gen_synthetic_mcqa, tokenize, McqaExample, PassageStyle, SyntheticSpec, Vocabulary};
use mmm::encoder::EncoderConfig;
use mmm::man::ClassifierKind;
use mmm::model::{Aggregation, Model, ModelConfig};
use mmm::train::{DataSource, DatasetSpec, ModelSettings, StageKind, StageSpec, TaskKind, TrainPlan};
use mmm_autodiff::Real;

pub fn synth(seed: u64, count: usize, sentences: usize) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        count,
        vocab_pool: (sentences + 3).max(6),
        sentences,
        options: 3,
        table_id: 1,
        style: PassageStyle::Written,
        passage_distractors: None,
    }
}

pub fn examples(seed: u64, count: usize, sentences: usize) -> Vec<McqaExample> {
    gen_synthetic_mcqa(&synth(seed, count, sentences)).unwrap()
}

pub fn vocab_for(examples: &[McqaExample]) -> Vocabulary {
    let tokens: Vec<String> = examples
        .iter()
        .flat_map(|ex| {
            ex.passage
                .iter()
                .chain([&ex.question])
                .chain(&ex.options)
                .flat_map(|s| tokenize(s))
                .collect::<Vec<_>>()
        })
        .collect();
    Vocabulary::build(&tokens, 1)
}

/// A small randomly initialized model with a fresh choice head of `kind`.
pub fn model<T: Real>(kind: ClassifierKind, vocab: Vocabulary, max_len: usize, seed: u64) -> Model<T> {
    let mut enc = EncoderConfig::new(0);
    enc.hidden = 16;
    enc.layers = 2;
    enc.heads = 2;
    enc.max_len = max_len;
    enc.intermediate = Some(32);
    enc.init_std = 0.3;
    enc.dropout = 0.1;
    enc.seed = seed;
    let mut m = Model::new(
        ModelConfig {
            encoder: enc,
            classifier: kind,
            aggregation: Aggregation::Sum,
        },
        vocab,
    )
    .unwrap();
    m.reset_choice_head(kind, seed + 1);
    m
}

pub fn tiny_settings() -> ModelSettings {
    ModelSettings {
        hidden: 8,
        layers: 1,
        heads: 2,
        max_len: 48,
        dropout: 0.1,
        intermediate: Some(16),
        init_std: 0.1,
        classifier: ClassifierKind::Man { steps: 2 },
        aggregation: Aggregation::Sum,
    }
}

pub fn stage(name: &str, kind: StageKind, datasets: &[&str], epochs: usize) -> StageSpec {
    StageSpec {
        name: name.into(),
        kind,
        datasets: datasets.iter().map(|d| d.to_string()).collect(),
        dev: None,
        epochs,
        lr_max: 1e-3,
        warmup: 0.1,
        clip: Some(1.0),
        batch_size: 4,
        seed: None,
        eval_every: Some(4),
        patience: None,
        max_steps: None,
    }
}

/// Coarse-tuning on pairs, then multi-task on two MCQA sets.
pub fn tiny_plan(seed: u64) -> TrainPlan {
    let mut nli = synth(11, 16, 1);
    nli.passage_distractors = None;
    let mut dialogue = synth(13, 12, 3);
    dialogue.style = PassageStyle::Dialogue;
    let mut dialogue_dev = dialogue.clone();
    dialogue_dev.seed = 14;
    dialogue_dev.count = 6;
    let mut multi = stage("multi-task", StageKind::MultiTask, &["written", "dialogue"], 2);
    multi.dev = Some("dialogue".into());
    TrainPlan {
        seed,
        model: tiny_settings(),
        min_freq: 1,
        datasets: vec![
            DatasetSpec {
                name: "nli".into(),
                kind: TaskKind::Pair,
                train: DataSource::Synthetic(nli),
                dev: None,
                speaker_normalization: false,
            },
            DatasetSpec {
                name: "written".into(),
                kind: TaskKind::Mcqa,
                train: DataSource::Synthetic(synth(12, 12, 3)),
                dev: None,
                speaker_normalization: false,
            },
            DatasetSpec {
                name: "dialogue".into(),
                kind: TaskKind::Mcqa,
                train: DataSource::Synthetic(dialogue),
                dev: Some(DataSource::Synthetic(dialogue_dev)),
                speaker_normalization: true,
            },
        ],
        stages: vec![stage("coarse-tune", StageKind::CoarseTune, &["nli"], 1), multi],
    }
}
