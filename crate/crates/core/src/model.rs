//! End-to-end option scoring: packing, sliding windows, encoder, heads,
//! aggregation, loss and prediction.

use std::ops::Range;

use mmm_autodiff::{cross_entropy_value, Graph, ParamId, ParamStore, Real, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::dataset::{McqaExample, PairExample};
use crate::data::packing::{pack_pair, pack_sequence, EncodedSequence};
use crate::data::text::tokenize;
use crate::data::vocab::Vocabulary;
use crate::encoder::{pooled, Encoder, EncoderConfig};
use crate::error::{usage, MmmError, Result};
use crate::man::{fcnn_logit, ChoiceHead, ClassifierKind, FcnnParams};

pub const PAIR_CLASSES: usize = 3;

/// How per-snippet logit vectors of one example are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Sum,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub classifier: ClassifierKind,
    #[serde(default)]
    pub aggregation: Aggregation,
}

/// One logit per answer option.
pub type OptionLogits<T> = Vec<T>;

/// An MCQA example packed for the model: one entry per passage snippet, each
/// holding one trimmed sequence per option.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedMcqa {
    pub id: String,
    pub label: Option<usize>,
    pub snippets: Vec<Vec<EncodedSequence>>,
}

impl PreparedMcqa {
    pub fn num_options(&self) -> usize {
        self.snippets[0].len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedPair {
    pub seq: EncodedSequence,
    pub label: usize,
}

/// Snippet ranges over `len` tokens with the given window and overlap.
/// Starts advance by `window - overlap`; the last snippet may be shorter.
pub fn sliding_window_split(len: usize, window: usize, overlap: usize) -> Result<Vec<Range<usize>>> {
    if window == 0 {
        return usage("sliding window must be positive");
    }
    if overlap >= window {
        return usage(format!("overlap {overlap} must be smaller than window {window}"));
    }
    let stride = window - overlap;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + window).min(len);
        out.push(start..end);
        if end == len {
            return Ok(out);
        }
        start += stride;
    }
}

/// Tokenizes and packs an example. The passage budget is shared by all
/// options: `max_len - |Q| - max |O| - 3`, with half-budget overlap.
pub fn prepare_mcqa(example: &McqaExample, vocab: &Vocabulary, max_len: usize) -> Result<PreparedMcqa> {
    example.validate().map_err(MmmError::Usage)?;
    let passage: Vec<String> = example.passage.iter().flat_map(|s| tokenize(s)).collect();
    let question = tokenize(&example.question);
    let options: Vec<Vec<String>> = example.options.iter().map(|o| tokenize(o)).collect();
    if passage.is_empty() || question.is_empty() || options.iter().any(Vec::is_empty) {
        return usage(format!("example {}: empty passage, question or option", example.id));
    }
    let longest = options.iter().map(Vec::len).max().unwrap_or(0);
    let budget = max_len.saturating_sub(question.len() + longest + 3);
    if budget == 0 {
        return usage(format!(
            "example {}: question and options leave no room for the passage in {max_len} tokens",
            example.id
        ));
    }
    let windows = sliding_window_split(passage.len(), budget, budget / 2)?;
    let snippets = windows
        .into_iter()
        .map(|w| {
            options
                .iter()
                .map(|o| Ok(pack_sequence(&passage[w.clone()], &question, o, vocab, max_len)?.trimmed()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedMcqa {
        id: example.id.clone(),
        label: example.label,
        snippets,
    })
}

pub fn prepare_pair(example: &PairExample, vocab: &Vocabulary, max_len: usize) -> Result<PreparedPair> {
    let premise = tokenize(&example.premise);
    let hypothesis = tokenize(&example.hypothesis);
    Ok(PreparedPair {
        seq: pack_pair(&premise, &hypothesis, vocab, max_len)?.trimmed(),
        label: example.label.index(),
    })
}

/// Elementwise sum (or max) of per-snippet logits.
pub fn aggregate_snippet_logits<T: Real>(snippets: &[OptionLogits<T>], how: Aggregation) -> Result<OptionLogits<T>> {
    let Some(first) = snippets.first() else {
        return usage("no snippet logits to aggregate");
    };
    if snippets.iter().any(|s| s.len() != first.len()) {
        return usage("snippet logit vectors differ in length");
    }
    let mut out = first.clone();
    for s in &snippets[1..] {
        for (o, &x) in out.iter_mut().zip(s) {
            *o = match how {
                Aggregation::Sum => *o + x,
                Aggregation::Max => o.max(x),
            };
        }
    }
    Ok(out)
}

/// `-log softmax(logits)[label]`.
pub fn loss<T: Real>(logits: &[T], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return usage(format!("label {label} out of range for {} options", logits.len()));
    }
    cross_entropy_value(logits, label)
        .map(T::as_f64)
        .ok_or_else(|| MmmError::Numeric("non-finite logits in loss".into()))
}

/// Index of the largest logit; ties go to the lowest index.
pub fn predict<T: Real>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

/// Encoder plus optional choice and pair heads sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub choice: Option<ChoiceHead>,
    pub pair: Option<FcnnParams>,
}

impl<T: Real> Model<T> {
    /// Fresh encoder seeded from `config.encoder.seed`; no heads yet.
    /// The encoder vocabulary size is taken from `vocab`.
    pub fn new(mut config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.encoder.vocab_size = vocab.len();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.encoder.seed);
        let encoder = Encoder::init(config.encoder.clone(), &mut store, &mut rng)?;
        Ok(Self {
            config,
            vocab,
            store,
            encoder,
            choice: None,
            pair: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.encoder.hidden
    }

    pub fn max_len(&self) -> usize {
        self.config.encoder.max_len
    }

    /// Replaces any existing choice head with a fresh one of `kind`.
    pub fn reset_choice_head(&mut self, kind: ClassifierKind, seed: u64) {
        self.drop_choice_head();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, std) = (self.dim(), self.config.encoder.init_std);
        self.choice = Some(ChoiceHead::init(kind, &mut self.store, d, std, &mut rng));
        self.config.classifier = kind;
    }

    pub fn reset_pair_head(&mut self, seed: u64) {
        self.drop_pair_head();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, std) = (self.dim(), self.config.encoder.init_std);
        self.pair = Some(FcnnParams::init(
            &mut self.store,
            "pair.fcnn",
            d,
            PAIR_CLASSES,
            std,
            &mut rng,
        ));
    }

    pub fn drop_choice_head(&mut self) {
        if let Some(head) = self.choice.take() {
            for id in head.ids() {
                self.store.remove(id);
            }
        }
    }

    pub fn drop_pair_head(&mut self) {
        if let Some(head) = self.pair.take() {
            for id in head.ids() {
                self.store.remove(id);
            }
        }
    }

    pub fn prepare_mcqa(&self, example: &McqaExample) -> Result<PreparedMcqa> {
        prepare_mcqa(example, &self.vocab, self.max_len())
    }

    pub fn prepare_pair(&self, example: &PairExample) -> Result<PreparedPair> {
        prepare_pair(example, &self.vocab, self.max_len())
    }

    fn choice_head(&self) -> Result<&ChoiceHead> {
        self.choice
            .as_ref()
            .ok_or_else(|| MmmError::Usage("model has no multi-choice head".into()))
    }

    /// `[n]` logits of one snippet, one encoder pass per option.
    pub fn snippet_logits<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        options: &[EncodedSequence],
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let head = self.choice_head()?;
        let mut logits = Vec::with_capacity(options.len());
        for seq in options {
            let rows = self.encoder.forward(g, &self.store, seq, train, rng)?;
            let (logit, _) = head.logit(g, &self.store, rows, &seq.roles)?;
            logits.push(logit);
        }
        Ok(g.concat(&logits)?)
    }

    /// `[3]` logits of a premise/hypothesis pair.
    pub fn pair_logits<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        seq: &EncodedSequence,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let head = self
            .pair
            .as_ref()
            .ok_or_else(|| MmmError::Usage("model has no pair head".into()))?;
        let rows = self.encoder.forward(g, &self.store, seq, train, rng)?;
        let pooled = pooled(g, rows)?;
        fcnn_logit(g, &self.store, head, pooled)
    }

    /// Eval-mode option logits, aggregated over snippets.
    pub fn score_options(&self, example: &PreparedMcqa) -> Result<OptionLogits<T>> {
        // dropout is off, so this generator is never drawn from
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let per_snippet = example
            .snippets
            .iter()
            .map(|options| {
                let mut g = Graph::new();
                let v = self.snippet_logits(&mut g, options, false, &mut rng)?;
                Ok(g.value(v).to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        aggregate_snippet_logits(&per_snippet, self.config.aggregation)
    }

    pub fn score_pair(&self, pair: &PreparedPair) -> Result<Vec<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let v = self.pair_logits(&mut g, &pair.seq, false, &mut rng)?;
        Ok(g.value(v).to_vec())
    }

    /// Parameter ids that the choice path touches.
    pub fn choice_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.param_ids();
        if let Some(h) = &self.choice {
            ids.extend(h.ids());
        }
        ids
    }
}
