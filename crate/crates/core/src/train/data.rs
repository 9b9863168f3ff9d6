//! Loading, normalizing and packing the datasets a plan declares.

use std::path::Path;

use mmm_autodiff::Real;

use crate::data::dataset::{load_mcqa_json, load_pair_json, McqaExample, PairExample};
use crate::data::synthetic::{gen_synthetic_mcqa, gen_synthetic_nli};
use crate::data::text::tokenize;
use crate::data::vocab::Vocabulary;
use crate::error::{usage, Result};
use crate::model::{Model, PreparedMcqa, PreparedPair};
use crate::train::plan::{DataSource, DatasetSpec, TaskKind, TrainPlan};

#[derive(Clone, Debug, PartialEq)]
pub enum Examples {
    Mcqa(Vec<McqaExample>),
    Pair(Vec<PairExample>),
}

impl Examples {
    pub fn len(&self) -> usize {
        match self {
            Examples::Mcqa(v) => v.len(),
            Examples::Pair(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn texts(&self) -> Vec<&str> {
        match self {
            Examples::Mcqa(v) => v
                .iter()
                .flat_map(|e| {
                    e.passage
                        .iter()
                        .map(String::as_str)
                        .chain([e.question.as_str()])
                        .chain(e.options.iter().map(String::as_str))
                })
                .collect(),
            Examples::Pair(v) => v
                .iter()
                .flat_map(|p| [p.premise.as_str(), p.hypothesis.as_str()])
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedDataset {
    pub spec: DatasetSpec,
    pub train: Examples,
    pub dev: Option<Examples>,
}

fn load_source(kind: TaskKind, source: &DataSource, base_dir: &Path, normalize: bool) -> Result<Examples> {
    let mut examples = match (kind, source) {
        (TaskKind::Mcqa, DataSource::File(p)) => Examples::Mcqa(load_mcqa_json(base_dir.join(p))?),
        (TaskKind::Pair, DataSource::File(p)) => Examples::Pair(load_pair_json(base_dir.join(p))?),
        (TaskKind::Mcqa, DataSource::Synthetic(s)) => Examples::Mcqa(gen_synthetic_mcqa(s)?),
        (TaskKind::Pair, DataSource::Synthetic(s)) => Examples::Pair(gen_synthetic_nli(s)?),
    };
    if normalize {
        if let Examples::Mcqa(v) = &mut examples {
            *v = v.iter().map(McqaExample::speaker_normalized).collect();
        }
    }
    Ok(examples)
}

pub fn load_datasets(plan: &TrainPlan, base_dir: &Path) -> Result<Vec<LoadedDataset>> {
    plan.datasets
        .iter()
        .map(|spec| {
            let norm = spec.speaker_normalization;
            let train = load_source(spec.kind, &spec.train, base_dir, norm)?;
            if train.is_empty() {
                return usage(format!("dataset {} has no training examples", spec.name));
            }
            let dev = spec
                .dev
                .as_ref()
                .map(|d| load_source(spec.kind, d, base_dir, norm))
                .transpose()?;
            Ok(LoadedDataset {
                spec: spec.clone(),
                train,
                dev,
            })
        })
        .collect()
}

/// Vocabulary over the training splits of every dataset, in plan order.
pub fn build_plan_vocab(datasets: &[LoadedDataset], min_freq: usize) -> Vocabulary {
    let tokens: Vec<String> = datasets
        .iter()
        .flat_map(|d| d.train.texts())
        .flat_map(tokenize)
        .collect();
    Vocabulary::build(&tokens, min_freq)
}

#[derive(Clone, Debug, PartialEq)]
pub enum PreparedSplit {
    Mcqa(Vec<PreparedMcqa>),
    Pair(Vec<PreparedPair>),
}

impl PreparedSplit {
    pub fn prepare<T: Real>(model: &Model<T>, examples: &Examples) -> Result<Self> {
        Ok(match examples {
            Examples::Mcqa(v) => PreparedSplit::Mcqa(v.iter().map(|e| model.prepare_mcqa(e)).collect::<Result<_>>()?),
            Examples::Pair(v) => PreparedSplit::Pair(v.iter().map(|e| model.prepare_pair(e)).collect::<Result<_>>()?),
        })
    }

    pub fn len(&self) -> usize {
        match self {
            PreparedSplit::Mcqa(v) => v.len(),
            PreparedSplit::Pair(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A training instance: an example index and, for multi-choice data, the
/// snippet within it. Every snippet carries its example's label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Instance {
    pub example: usize,
    pub snippet: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDataset {
    pub name: String,
    pub train: PreparedSplit,
    pub instances: Vec<Instance>,
    pub dev: Option<PreparedSplit>,
}

impl PreparedDataset {
    pub fn new<T: Real>(model: &Model<T>, loaded: &LoadedDataset) -> Result<Self> {
        let train = PreparedSplit::prepare(model, &loaded.train)?;
        let instances = match &train {
            PreparedSplit::Mcqa(v) => {
                let mut out = Vec::new();
                for (i, ex) in v.iter().enumerate() {
                    if ex.label.is_none() {
                        return usage(format!(
                            "training example {} in {} has no label",
                            ex.id, loaded.spec.name
                        ));
                    }
                    out.extend((0..ex.snippets.len()).map(|s| Instance { example: i, snippet: s }));
                }
                out
            }
            PreparedSplit::Pair(v) => (0..v.len()).map(|i| Instance { example: i, snippet: 0 }).collect(),
        };
        let dev = loaded
            .dev
            .as_ref()
            .map(|d| PreparedSplit::prepare(model, d))
            .transpose()?;
        Ok(Self {
            name: loaded.spec.name.clone(),
            train,
            instances,
            dev,
        })
    }
}
