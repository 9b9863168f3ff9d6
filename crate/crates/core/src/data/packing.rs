use serde::{Deserialize, Serialize};

use crate::data::vocab::{Vocabulary, CLS, PAD, SEP};
use crate::error::{usage, Result};

/// Which segment a packed position belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Special,
    Passage,
    /// Question or answer option.
    Qo,
    Pad,
}

/// Token ids with per-position roles. PAD positions only occur at the tail
/// and position 0 always holds the single CLS token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedSequence {
    pub token_ids: Vec<u32>,
    pub roles: Vec<Role>,
    pub attention_mask: Vec<u8>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of non-PAD positions.
    pub fn content_len(&self) -> usize {
        self.roles.iter().take_while(|r| **r != Role::Pad).count()
    }

    /// The same sequence with trailing PAD positions removed.
    pub fn trimmed(&self) -> EncodedSequence {
        let n = self.content_len();
        EncodedSequence {
            token_ids: self.token_ids[..n].to_vec(),
            roles: self.roles[..n].to_vec(),
            attention_mask: self.attention_mask[..n].to_vec(),
        }
    }

    /// Appends `extra` PAD positions.
    pub fn padded(&self, extra: usize) -> EncodedSequence {
        let mut out = self.clone();
        out.token_ids.extend(std::iter::repeat_n(PAD, extra));
        out.roles.extend(std::iter::repeat_n(Role::Pad, extra));
        out.attention_mask.extend(std::iter::repeat_n(0, extra));
        out
    }

    /// Tokens of the given role, in order.
    pub fn tokens_with_role<'v>(&self, role: Role, vocab: &'v Vocabulary) -> Vec<&'v str> {
        self.token_ids
            .iter()
            .zip(&self.roles)
            .filter(|(_, r)| **r == role)
            .map(|(&id, _)| vocab.token(id).unwrap_or("[UNK]"))
            .collect()
    }
}

fn assemble(first: &[u32], second: &[u32], max_len: usize) -> EncodedSequence {
    let mut token_ids = Vec::with_capacity(max_len);
    let mut roles = Vec::with_capacity(max_len);
    token_ids.push(CLS);
    roles.push(Role::Special);
    token_ids.extend_from_slice(first);
    roles.extend(std::iter::repeat_n(Role::Passage, first.len()));
    token_ids.push(SEP);
    roles.push(Role::Special);
    token_ids.extend_from_slice(second);
    roles.extend(std::iter::repeat_n(Role::Qo, second.len()));
    token_ids.push(SEP);
    roles.push(Role::Special);
    let content = token_ids.len();
    token_ids.resize(max_len, PAD);
    roles.resize(max_len, Role::Pad);
    let attention_mask = (0..max_len).map(|i| u8::from(i < content)).collect();
    EncodedSequence {
        token_ids,
        roles,
        attention_mask,
    }
}

/// Packs `[CLS] passage [SEP] question option [SEP]` and pads to `max_len`.
///
/// Over-budget inputs lose passage tokens from the tail; long passages are
/// meant to go through the sliding window instead. A question plus option
/// that cannot fit next to the three special tokens is a usage error.
pub fn pack_sequence<S: AsRef<str>>(
    passage: &[S],
    question: &[S],
    option: &[S],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<EncodedSequence> {
    if passage.is_empty() || question.is_empty() || option.is_empty() {
        return usage("pack_sequence needs non-empty passage, question and option");
    }
    let qo_len = question.len() + option.len();
    if qo_len + 3 > max_len {
        return usage(format!(
            "question and option take {qo_len} tokens; max_len {max_len} leaves {}",
            max_len.saturating_sub(3)
        ));
    }
    let keep = passage.len().min(max_len - 3 - qo_len);
    let p = vocab.encode(&passage[..keep]);
    let mut qo = vocab.encode(question);
    qo.extend(vocab.encode(option));
    Ok(assemble(&p, &qo, max_len))
}

/// Packs `[CLS] premise [SEP] hypothesis [SEP]`, truncating the premise tail
/// first and then the hypothesis tail when over budget.
pub fn pack_pair<S: AsRef<str>>(
    premise: &[S],
    hypothesis: &[S],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<EncodedSequence> {
    if premise.is_empty() || hypothesis.is_empty() {
        return usage("pack_pair needs non-empty premise and hypothesis");
    }
    if max_len < 5 {
        return usage(format!("max_len {max_len} too small for a sentence pair"));
    }
    let budget = max_len - 3;
    let h_keep = hypothesis.len().min(budget - 1);
    let p_keep = premise.len().min(budget - h_keep);
    Ok(assemble(
        &vocab.encode(&premise[..p_keep]),
        &vocab.encode(&hypothesis[..h_keep]),
        max_len,
    ))
}
