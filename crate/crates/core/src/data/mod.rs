//! Dataset ingestion, tokenization, speaker normalization, sequence packing
//! and synthetic corpora.

pub mod dataset;
pub mod packing;
pub mod synthetic;
pub mod text;
pub mod vocab;

pub use dataset::{load_mcqa_json, load_pair_json, write_json, McqaExample, NliLabel, PairExample};
pub use packing::{pack_pair, pack_sequence, EncodedSequence, Role};
pub use synthetic::{gen_synthetic_mcqa, gen_synthetic_nli, Lexicon, PassageStyle, SyntheticSpec};
pub use text::{speaker_normalize, tokenize};
pub use vocab::Vocabulary;
