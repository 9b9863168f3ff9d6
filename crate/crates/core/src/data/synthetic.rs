//! Seeded synthetic corpora that are solvable by construction.
//!
//! Every dataset is drawn from a lexicon fixed by `table_id`: a pool of
//! names, base verbs and objects, plus a paraphrase table that maps each base
//! verb and object to a synonym and each base verb to an antonym. An antonym
//! is the synonym of the next verb in the pool, so hypotheses draw every word
//! from the same vocabulary and the label cannot be read off the hypothesis
//! alone. Passages use base words; correct answers and entailed hypotheses
//! use the paraphrases.
//! Sharing `table_id` between the NLI and MCQA generators is what gives
//! coarse-tuning something to transfer.

use std::collections::{HashMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::dataset::{McqaExample, NliLabel, PairExample, MAX_OPTIONS, MIN_OPTIONS};
use crate::data::text::{speaker_normalize, tokenize};
use crate::error::{usage, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassageStyle {
    /// Narrative sentences `name verb the object .`; questions name the actor.
    #[default]
    Written,
    /// Utterances `w: verb the object .` with abbreviated speaker tags;
    /// questions ask what the man or the woman says.
    Dialogue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub count: usize,
    /// Size of each word pool (names, verbs, objects).
    pub vocab_pool: usize,
    pub sentences: usize,
    pub options: usize,
    pub table_id: u64,
    #[serde(default)]
    pub style: PassageStyle,
    /// How many distractors paraphrase other sentences of the same passage;
    /// the rest paraphrase fresh sentences absent from it. Defaults to all
    /// of them. Passage distractors can only be ruled out through the
    /// question.
    #[serde(default)]
    pub passage_distractors: Option<usize>,
}

impl SyntheticSpec {
    pub fn passage_distractors(&self) -> usize {
        self.passage_distractors.unwrap_or(self.options.saturating_sub(1))
    }

    fn fresh_distractors(&self) -> usize {
        self.options.saturating_sub(1 + self.passage_distractors())
    }

    fn validate(&self, for_mcqa: bool) -> Result<()> {
        if self.count == 0 || self.vocab_pool < 2 || self.sentences == 0 {
            return usage(format!("synthetic spec counts must be positive: {self:?}"));
        }
        if for_mcqa {
            if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&self.options) {
                return usage(format!("options must lie in {MIN_OPTIONS}..={MAX_OPTIONS}"));
            }
            if self.sentences < self.options {
                return usage("need at least as many sentences as options");
            }
            if self.passage_distractors() > self.options - 1 {
                return usage("passage_distractors exceeds the number of distractors");
            }
            if self.vocab_pool < self.sentences + self.fresh_distractors() {
                return usage("vocab_pool must cover the passage sentences and fresh distractors");
            }
        }
        Ok(())
    }
}

/// Word pools and the paraphrase table shared by all generators.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    pub names: Vec<String>,
    pub verbs: Vec<String>,
    pub objects: Vec<String>,
    verb_synonyms: Vec<String>,
    object_synonyms: Vec<String>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

impl Lexicon {
    pub fn new(table_id: u64, pool: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(table_id ^ 0x5eed_7ab1e);
        let mut seen = HashSet::new();
        let mut fresh = |syllables: usize| loop {
            let w: String = (0..syllables)
                .flat_map(|_| {
                    [
                        *CONSONANTS.choose(&mut rng).expect("non-empty") as char,
                        *VOWELS.choose(&mut rng).expect("non-empty") as char,
                    ]
                })
                .collect();
            if seen.insert(w.clone()) {
                return w;
            }
        };
        let mut take = |syllables| (0..pool).map(|_| fresh(syllables)).collect::<Vec<_>>();
        // names get three syllables so they never collide with predicate words
        let names = take(3);
        let verbs = take(2);
        let verb_synonyms = take(2);
        let objects = take(2);
        let object_synonyms = take(2);
        Self {
            names,
            verbs,
            objects,
            verb_synonyms,
            object_synonyms,
        }
    }

    /// Paraphrase table: base word → synonym, for verbs and objects.
    pub fn synonym_table(&self) -> HashMap<&str, &str> {
        self.verbs
            .iter()
            .zip(&self.verb_synonyms)
            .chain(self.objects.iter().zip(&self.object_synonyms))
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect()
    }

    /// Antonym table for base verbs.
    pub fn antonym_table(&self) -> HashMap<&str, &str> {
        self.verbs
            .iter()
            .enumerate()
            .map(|(i, v)| (v, &self.verb_synonyms[self.antonym_index(i)]))
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect()
    }

    fn predicate(&self, verb: usize, object: usize) -> String {
        format!("{} the {}", self.verbs[verb], self.objects[object])
    }

    fn paraphrase(&self, verb: usize, object: usize) -> String {
        format!("{} the {}", self.verb_synonyms[verb], self.object_synonyms[object])
    }

    fn contradiction(&self, verb: usize, object: usize) -> String {
        let antonym = &self.verb_synonyms[self.antonym_index(verb)];
        format!("{antonym} the {}", self.object_synonyms[object])
    }

    fn antonym_index(&self, verb: usize) -> usize {
        (verb + 1) % self.verbs.len()
    }
}

fn distinct<R: Rng>(rng: &mut R, pool: usize, k: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, pool, k).into_vec()
}

pub fn gen_synthetic_mcqa(spec: &SyntheticSpec) -> Result<Vec<McqaExample>> {
    spec.validate(true)?;
    let lex = Lexicon::new(spec.table_id, spec.vocab_pool);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.sentences;
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        // indices k.. are fresh sentences for out-of-passage distractors
        let fresh = spec.fresh_distractors();
        let verbs = distinct(&mut rng, spec.vocab_pool, k + fresh);
        let objects = distinct(&mut rng, spec.vocab_pool, k + fresh);
        let evidence = rng.random_range(0..k);
        let (passage, question) = match spec.style {
            PassageStyle::Written => {
                let names = distinct(&mut rng, spec.vocab_pool, k);
                let passage = (0..k)
                    .map(|j| format!("{} {} .", lex.names[names[j]], lex.predicate(verbs[j], objects[j])))
                    .collect();
                (passage, format!("what did {} do ?", lex.names[names[evidence]]))
            }
            PassageStyle::Dialogue => {
                let woman_speaks = rng.random_bool(0.5);
                let passage = (0..k)
                    .map(|j| {
                        let woman = (j == evidence) == woman_speaks;
                        let tag = if !woman {
                            "m"
                        } else if rng.random_bool(0.5) {
                            "w"
                        } else {
                            "f"
                        };
                        format!("{tag}: {} .", lex.predicate(verbs[j], objects[j]))
                    })
                    .collect();
                let who = if woman_speaks { "woman" } else { "man" };
                (passage, format!("what does the {who} say ?"))
            }
        };
        let mut others: Vec<usize> = (0..k).filter(|&j| j != evidence).collect();
        others.shuffle(&mut rng);
        let mut sources: Vec<usize> = std::iter::once(evidence)
            .chain(others.into_iter().take(spec.passage_distractors()))
            .chain(k..k + fresh)
            .collect();
        sources.shuffle(&mut rng);
        let label = sources.iter().position(|&j| j == evidence).expect("evidence present");
        let options = sources.iter().map(|&j| lex.paraphrase(verbs[j], objects[j])).collect();
        out.push(McqaExample {
            id: format!("syn-{}-{i}", spec.seed),
            passage,
            question,
            options,
            label: Some(label),
        });
    }
    Ok(out)
}

pub fn gen_synthetic_nli(spec: &SyntheticSpec) -> Result<Vec<PairExample>> {
    spec.validate(false)?;
    let lex = Lexicon::new(spec.table_id, spec.vocab_pool);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let name = &lex.names[rng.random_range(0..spec.vocab_pool)];
        let verbs = distinct(&mut rng, spec.vocab_pool, 2);
        let objects = distinct(&mut rng, spec.vocab_pool, 2);
        let label = NliLabel::ALL[rng.random_range(0..3)];
        let premise = format!("{name} {} .", lex.predicate(verbs[0], objects[0]));
        let predicate = match label {
            NliLabel::Entailment => lex.paraphrase(verbs[0], objects[0]),
            NliLabel::Contradiction => lex.contradiction(verbs[0], objects[0]),
            NliLabel::Neutral => lex.paraphrase(verbs[1], objects[1]),
        };
        out.push(PairExample {
            premise,
            hypothesis: format!("{name} {predicate} ."),
            label,
        });
    }
    Ok(out)
}

/// Rewrites every word through the synonym table, leaving others as is.
fn rewrite<'a>(tokens: &'a [String], table: &HashMap<&str, &'a str>) -> Vec<&'a str> {
    tokens
        .iter()
        .map(|t| table.get(t.as_str()).copied().unwrap_or(t.as_str()))
        .collect()
}

/// Solves a generated MCQA example by parsing its text and applying the
/// paraphrase table. Returns `None` when the example is not of the
/// generated form.
pub fn mcqa_rule_oracle(lex: &Lexicon, example: &McqaExample) -> Option<usize> {
    let table = lex.synonym_table();
    let q = tokenize(&example.question);
    let evidence: Vec<String> = match q.iter().map(String::as_str).collect::<Vec<_>>()[..] {
        ["what", "did", name, "do", "?"] => example
            .passage
            .iter()
            .map(|s| tokenize(s))
            .find(|t| t.first().map(String::as_str) == Some(name))?[1..]
            .to_vec(),
        ["what", "does", "the", who, "say", "?"] => example
            .passage
            .iter()
            .map(|s| tokenize(&speaker_normalize(s)))
            .find(|t| t.first().map(String::as_str) == Some(who) && t.get(1).map(String::as_str) == Some(":"))?[2..]
            .to_vec(),
        _ => return None,
    };
    // drop the sentence-final period
    let predicate = &evidence[..evidence.len().checked_sub(1)?];
    let expected = rewrite(predicate, &table);
    example
        .options
        .iter()
        .position(|o| tokenize(o).iter().map(String::as_str).eq(expected.iter().copied()))
}

/// Labels a generated pair by comparing the hypothesis with the paraphrase
/// and antonym rewrites of the premise.
pub fn nli_rule_oracle(lex: &Lexicon, pair: &PairExample) -> NliLabel {
    let syn = lex.synonym_table();
    let ant = lex.antonym_table();
    let p = tokenize(&pair.premise);
    let h = tokenize(&pair.hypothesis);
    if rewrite(&p, &syn).iter().copied().eq(h.iter().map(String::as_str)) {
        return NliLabel::Entailment;
    }
    let contradicts = p.len() == h.len()
        && p.len() > 2
        && ant.get(p[1].as_str()) == Some(&h[1].as_str())
        && p[0] == h[0]
        && rewrite(&p[2..], &syn)
            .iter()
            .copied()
            .eq(h[2..].iter().map(String::as_str));
    if contradicts {
        NliLabel::Contradiction
    } else {
        NliLabel::Neutral
    }
}
