//! Finite-difference gradient suite over every primitive and the assembled
//! model: the encoder, the multi-step head at several depths, and the full
//! loss over aggregated option scores. Shared by the CLI and the tests.

use mmm_autodiff::suite::primitive_cases;
use mmm_autodiff::{grad_check_params, AutodiffError, GradCheckReport, Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::synthetic::{gen_synthetic_mcqa, SyntheticSpec};
use crate::data::text::tokenize;
use crate::data::vocab::Vocabulary;
use crate::encoder::EncoderConfig;
use crate::error::{MmmError, Result};
use crate::man::{man_forward, ClassifierKind, ManParams, Memories};
use crate::model::{Aggregation, Model, ModelConfig};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;
/// Perturbed coordinates per parameter tensor in the model-level cases.
const COORDS_PER_PARAM: usize = 4;
/// Large enough that deep parameters get gradients far above roundoff.
const INIT_STD: f64 = 0.3;

#[derive(Clone, Debug, Serialize)]
pub struct GradientCase {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Parameter name (or input index) and flat coordinate of the worst entry.
    pub worst_at: String,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

impl GradientCase {
    fn new(name: impl Into<String>, seed: u64, r: &GradCheckReport, store: Option<&ParamStore<f64>>) -> Self {
        let worst_at = match (r.worst, store) {
            (Some((p, j)), Some(s)) => format!("{}[{j}]", s.param(ParamId(p)).name),
            (Some((i, j)), None) => format!("input{i}[{j}]"),
            (None, _) => String::new(),
        };
        Self {
            name: name.into(),
            seed,
            max_rel_err: r.max_rel_err,
            coords_checked: r.coords_checked,
            worst_at,
            analytic_at_worst: r.analytic_at_worst,
            numeric_at_worst: r.numeric_at_worst,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradientSuite {
    pub cases: Vec<GradientCase>,
}

impl GradientSuite {
    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradientCase> {
        self.cases.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn passed(&self) -> bool {
        !self.cases.is_empty() && self.max_rel_err() < GRADIENT_TOLERANCE
    }
}

fn ad(e: MmmError) -> AutodiffError {
    match e {
        MmmError::Autodiff(inner) => inner,
        other => AutodiffError::Usage(other.to_string()),
    }
}

fn project(g: &mut Graph<f64>, out: Var, w: &Tensor<f64>) -> mmm_autodiff::Result<Var> {
    let w = g.constant(w.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn small_encoder(seed: u64, max_len: usize) -> EncoderConfig {
    let mut c = EncoderConfig::new(0);
    c.hidden = 16;
    c.layers = 2;
    c.heads = 2;
    c.max_len = max_len;
    c.intermediate = Some(32);
    c.init_std = INIT_STD;
    c.seed = seed;
    c
}

/// A synthetic example whose passage needs two snippets at `max_len`.
fn long_example(seed: u64) -> Result<(crate::data::McqaExample, Vocabulary)> {
    let spec = SyntheticSpec {
        seed,
        count: 1,
        vocab_pool: 6,
        sentences: 4,
        options: 3,
        table_id: 1,
        style: Default::default(),
        passage_distractors: None,
    };
    let ex = gen_synthetic_mcqa(&spec)?.remove(0);
    let tokens: Vec<String> = ex
        .passage
        .iter()
        .chain([&ex.question])
        .chain(&ex.options)
        .flat_map(|s| tokenize(s))
        .collect();
    let vocab = Vocabulary::build(&tokens, 1);
    Ok((ex, vocab))
}

/// Encoder output in training mode (dropout mask fixed per evaluation).
fn encoder_case(seed: u64) -> Result<GradientCase> {
    let (ex, vocab) = long_example(seed)?;
    let mut enc = small_encoder(seed, 24);
    enc.dropout = 0.1;
    let mut model = Model::<f64>::new(
        ModelConfig {
            encoder: enc,
            classifier: ClassifierKind::Fcnn,
            aggregation: Aggregation::Sum,
        },
        vocab,
    )?;
    let seq = model.prepare_mcqa(&ex)?.snippets[0][0].clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::randn(&[seq.len(), model.dim()], 1.0, &mut rng);
    let encoder = model.encoder.clone();
    let report = grad_check_params(
        &mut model.store,
        |g, store| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = encoder.forward(g, store, &seq, true, &mut rng).map_err(ad)?;
            project(g, rows, &w)
        },
        EPS,
        Some(COORDS_PER_PARAM),
    )?;
    Ok(GradientCase::new("encoder d=16", seed, &report, Some(&model.store)))
}

/// The multi-step head alone, with the token memories as free parameters.
fn man_case(seed: u64, steps: usize) -> Result<GradientCase> {
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(steps as u64));
    let mut store = ParamStore::<f64>::new();
    let head = ManParams::init(&mut store, "man", d, steps, 0.5, &mut rng);
    let passage = store.add("passage", Tensor::randn(&[5, d], 1.0, &mut rng));
    let qo: Vec<_> = (0..3)
        .map(|i| store.add(format!("qo{i}"), Tensor::randn(&[4, d], 1.0, &mut rng)))
        .collect();
    let report = grad_check_params(
        &mut store,
        |g, store| {
            let vars = head.bind(g, store).map_err(ad)?;
            let p = g.param(store, passage);
            let mut logits = Vec::new();
            for &q in &qo {
                let mem = Memories {
                    passage: p,
                    qo: g.param(store, q),
                };
                logits.push(man_forward(g, &mem, &vars).map_err(ad)?.0);
            }
            let logits = g.concat(&logits)?;
            g.cross_entropy(logits, 1)
        },
        EPS,
        None,
    )?;
    Ok(GradientCase::new(format!("man K={steps}"), seed, &report, Some(&store)))
}

/// Cross-entropy of the snippet-summed option scores, through the whole
/// model. The graph's aggregated logits must equal `score_options`.
fn model_case(seed: u64, kind: ClassifierKind) -> Result<GradientCase> {
    let (ex, vocab) = long_example(seed)?;
    let mut model = Model::<f64>::new(
        ModelConfig {
            encoder: small_encoder(seed, 24),
            classifier: kind,
            aggregation: Aggregation::Sum,
        },
        vocab,
    )?;
    model.reset_choice_head(kind, seed.wrapping_add(1));
    let prep = model.prepare_mcqa(&ex)?;
    if prep.snippets.len() < 2 {
        return Err(MmmError::Degenerate("gradient example fits in one snippet".into()));
    }
    let label = prep.label.unwrap_or(0);
    let summed = |g: &mut Graph<f64>, m: &Model<f64>| -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut total = m.snippet_logits(g, &prep.snippets[0], false, &mut rng)?;
        for options in &prep.snippets[1..] {
            let l = m.snippet_logits(g, options, false, &mut rng)?;
            total = g.add(total, l)?;
        }
        Ok(total)
    };
    let mut g = Graph::new();
    let total = summed(&mut g, &model)?;
    if g.value(total) != model.score_options(&prep)?.as_slice() {
        return Err(MmmError::Numeric("graph aggregation differs from score_options".into()));
    }
    let mut store = model.store.clone();
    let report = grad_check_params(
        &mut store,
        |g, store| {
            let mut m = model.clone();
            m.store = store.clone();
            let logits = summed(g, &m).map_err(ad)?;
            g.cross_entropy(logits, label)
        },
        EPS,
        Some(COORDS_PER_PARAM),
    )?;
    let name = match kind {
        ClassifierKind::Fcnn => "loss∘score_options fcnn".to_string(),
        ClassifierKind::Man { steps } => format!("loss∘score_options K={steps}"),
    };
    Ok(GradientCase::new(name, seed, &report, Some(&store)))
}

/// Runs every case once per seed.
pub fn run_gradient_suite(seeds: &[u64]) -> Result<GradientSuite> {
    let mut cases = Vec::new();
    for &seed in seeds {
        for case in primitive_cases(seed) {
            cases.push(GradientCase::new(case.name, seed, &case.check()?, None));
        }
        cases.push(encoder_case(seed)?);
        for k in [1, 2, 5] {
            cases.push(man_case(seed, k)?);
        }
        for kind in [
            ClassifierKind::Man { steps: 1 },
            ClassifierKind::Man { steps: 2 },
            ClassifierKind::Man { steps: 5 },
            ClassifierKind::Fcnn,
        ] {
            cases.push(model_case(seed, kind)?);
        }
    }
    Ok(GradientSuite { cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_seed_passes() {
        let suite = run_gradient_suite(&[3]).unwrap();
        for c in &suite.cases {
            println!(
                "{:<28} {:.2e} ({} coords) {}",
                c.name, c.max_rel_err, c.coords_checked, c.worst_at
            );
        }
        assert!(suite.passed(), "{:?}", suite.worst());
    }
}
