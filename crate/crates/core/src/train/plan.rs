//! JSON-serializable description of a staged training run.

use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::synthetic::SyntheticSpec;
use crate::encoder::EncoderConfig;
use crate::error::{usage, Result};
use crate::man::ClassifierKind;
use crate::model::{Aggregation, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    #[serde(default = "d_layers")]
    pub layers: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_max_len")]
    pub max_len: usize,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub intermediate: Option<usize>,
    #[serde(default = "d_init_std")]
    pub init_std: f64,
    #[serde(default = "d_classifier")]
    pub classifier: ClassifierKind,
    #[serde(default)]
    pub aggregation: Aggregation,
}

fn d_hidden() -> usize {
    64
}
fn d_layers() -> usize {
    2
}
fn d_heads() -> usize {
    4
}
fn d_max_len() -> usize {
    512
}
fn d_dropout() -> f64 {
    0.1
}
fn d_init_std() -> f64 {
    0.02
}
fn d_classifier() -> ClassifierKind {
    ClassifierKind::Man { steps: 2 }
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            hidden: d_hidden(),
            layers: d_layers(),
            heads: d_heads(),
            max_len: d_max_len(),
            dropout: d_dropout(),
            intermediate: None,
            init_std: d_init_std(),
            classifier: d_classifier(),
            aggregation: Aggregation::Sum,
        }
    }
}

impl ModelSettings {
    /// Model config with the encoder seeded by `seed`; the vocabulary size is
    /// filled in when the model is built.
    pub fn to_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size: 0,
                hidden: self.hidden,
                layers: self.layers,
                heads: self.heads,
                max_len: self.max_len,
                dropout: self.dropout,
                intermediate: self.intermediate,
                init_std: self.init_std,
                seed,
            },
            classifier: self.classifier,
            aggregation: self.aggregation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Mcqa,
    Pair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// JSON file; relative paths resolve against the plan's base directory.
    File(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub kind: TaskKind,
    pub train: DataSource,
    #[serde(default)]
    pub dev: Option<DataSource>,
    /// Expand `w:`/`f:`/`m:` speaker tags before tokenizing.
    #[serde(default)]
    pub speaker_normalization: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    CoarseTune,
    MultiTask,
    SingleTask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub kind: StageKind,
    pub datasets: Vec<String>,
    /// Dataset whose dev split drives evaluation and early stopping;
    /// defaults to the last listed dataset that has one.
    #[serde(default)]
    pub dev: Option<String>,
    pub epochs: usize,
    pub lr_max: f64,
    #[serde(default = "d_warmup")]
    pub warmup: f64,
    /// Global gradient-norm bound; absent or 0 disables clipping.
    #[serde(default)]
    pub clip: Option<f64>,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Overrides the stage seed derived from the plan seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Evaluate every this many steps (and always at the last step).
    #[serde(default)]
    pub eval_every: Option<u64>,
    #[serde(default)]
    pub patience: Option<usize>,
    /// Overrides `epochs x steps per epoch of the largest dataset`.
    #[serde(default)]
    pub max_steps: Option<u64>,
}

fn d_warmup() -> f64 {
    0.1
}
fn d_batch() -> usize {
    16
}

impl StageSpec {
    pub fn clip_norm(&self) -> Option<f64> {
        self.clip.filter(|&c| c > 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default = "d_min_freq")]
    pub min_freq: usize,
    pub datasets: Vec<DatasetSpec>,
    pub stages: Vec<StageSpec>,
}

fn d_min_freq() -> usize {
    1
}

impl TrainPlan {
    pub fn dataset(&self, name: &str) -> Option<&DatasetSpec> {
        self.datasets.iter().find(|d| d.name == name)
    }

    pub fn dataset_index(&self, name: &str) -> Option<usize> {
        self.datasets.iter().position(|d| d.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return usage("plan needs at least one stage");
        }
        let mut names = HashSet::new();
        for d in &self.datasets {
            if !names.insert(d.name.as_str()) {
                return usage(format!("dataset name {} declared twice", d.name));
            }
        }
        for s in &self.stages {
            let kinds = s
                .datasets
                .iter()
                .map(|n| {
                    self.dataset(n)
                        .map(|d| d.kind)
                        .ok_or_else(|| crate::MmmError::Usage(format!("stage {}: unknown dataset {n}", s.name)))
                })
                .collect::<Result<Vec<_>>>()?;
            match s.kind {
                StageKind::CoarseTune if kinds.is_empty() || kinds.iter().any(|&k| k != TaskKind::Pair) => {
                    return usage(format!("stage {}: coarse_tune takes pair datasets only", s.name))
                }
                StageKind::SingleTask if kinds.len() != 1 => {
                    return usage(format!("stage {}: single_task takes exactly one dataset", s.name))
                }
                StageKind::MultiTask if kinds.len() < 2 => {
                    return usage(format!("stage {}: multi_task needs at least two datasets", s.name))
                }
                _ => {}
            }
            if let Some(dev) = &s.dev {
                if !s.datasets.contains(dev) {
                    return usage(format!(
                        "stage {}: dev dataset {dev} is not trained in this stage",
                        s.name
                    ));
                }
            }
            if s.epochs == 0 && s.max_steps.is_none() {
                return usage(format!("stage {}: epochs must be positive", s.name));
            }
            if s.max_steps == Some(0) || s.batch_size == 0 {
                return usage(format!("stage {}: max_steps and batch_size must be positive", s.name));
            }
            // written negated so NaN is rejected too
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            let bad = !(s.lr_max > 0.0) || !(s.warmup > 0.0 && s.warmup < 1.0);
            if bad {
                return usage(format!("stage {}: need lr_max > 0 and warmup in (0, 1)", s.name));
            }
            if s.clip.is_some_and(|c| c < 0.0 || !c.is_finite()) {
                return usage(format!("stage {}: clip must be a non-negative number", s.name));
            }
        }
        if self.min_freq == 0 {
            return usage("min_freq must be at least 1");
        }
        Ok(())
    }
}
