use mmm_autodiff::Real;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};
use crate::model::{predict, Model, PreparedMcqa, PreparedPair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub predicted: usize,
    pub gold: usize,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    fn from_records(dataset: &str, records: Vec<EvalRecord>) -> Result<Self> {
        if records.is_empty() {
            return usage(format!("dataset {dataset} is empty"));
        }
        let correct = records.iter().filter(|r| r.predicted == r.gold).count();
        Ok(Self {
            dataset: dataset.to_string(),
            accuracy: correct as f64 / records.len() as f64,
            correct,
            total: records.len(),
            records,
        })
    }
}

/// Eval-mode accuracy on labeled multi-choice examples.
pub fn evaluate<T: Real>(model: &Model<T>, dataset: &str, examples: &[PreparedMcqa]) -> Result<EvalReport> {
    if examples.is_empty() {
        return usage(format!("dataset {dataset} is empty"));
    }
    let records = examples
        .iter()
        .map(|ex| {
            let Some(gold) = ex.label else {
                return usage(format!("example {} in {dataset} has no label", ex.id));
            };
            let logits = model.score_options(ex)?;
            Ok(EvalRecord {
                id: ex.id.clone(),
                predicted: predict(&logits),
                gold,
                logits: logits.iter().map(|x| x.as_f64()).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_records(dataset, records)
}

/// Eval-mode accuracy on premise/hypothesis pairs.
pub fn evaluate_pairs<T: Real>(model: &Model<T>, dataset: &str, pairs: &[PreparedPair]) -> Result<EvalReport> {
    let records = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let logits = model.score_pair(p)?;
            Ok(EvalRecord {
                id: i.to_string(),
                predicted: predict(&logits),
                gold: p.label,
                logits: logits.iter().map(|x| x.as_f64()).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_records(dataset, records)
}
