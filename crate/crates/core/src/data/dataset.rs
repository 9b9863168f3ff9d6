use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::text::speaker_normalize;
use crate::error::{MmmError, Result};

pub const MIN_OPTIONS: usize = 2;
pub const MAX_OPTIONS: usize = 5;

/// One multiple-choice question over a passage of utterances or sentences.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqaExample {
    pub id: String,
    pub passage: Vec<String>,
    pub question: String,
    pub options: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

impl McqaExample {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let n = self.options.len();
        if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&n) {
            return Err(format!("needs {MIN_OPTIONS}..={MAX_OPTIONS} options, has {n}"));
        }
        if let Some(label) = self.label {
            if label >= n {
                return Err(format!("label {label} out of range for {n} options"));
            }
        }
        Ok(())
    }

    /// Copy with speaker tags of every passage utterance expanded.
    pub fn speaker_normalized(&self) -> McqaExample {
        McqaExample {
            passage: self.passage.iter().map(|u| speaker_normalize(u)).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum NliLabel {
    Entailment = 0,
    Neutral = 1,
    Contradiction = 2,
}

impl NliLabel {
    pub const ALL: [NliLabel; 3] = [NliLabel::Entailment, NliLabel::Neutral, NliLabel::Contradiction];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl TryFrom<u8> for NliLabel {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        NliLabel::ALL
            .get(v as usize)
            .copied()
            .ok_or_else(|| format!("label {v} is not one of 0 (entailment), 1 (neutral), 2 (contradiction)"))
    }
}

impl From<NliLabel> for u8 {
    fn from(l: NliLabel) -> u8 {
        l as u8
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairExample {
    pub premise: String,
    pub hypothesis: String,
    pub label: NliLabel,
}

fn load_records<R, F>(path: &Path, validate: F) -> Result<Vec<R>>
where
    R: for<'de> Deserialize<'de>,
    F: Fn(&R) -> std::result::Result<(), String>,
{
    let err = |msg: String| MmmError::Load {
        path: path.display().to_string(),
        msg,
    };
    let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let values: Vec<serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| err(format!("malformed JSON: {e}")))?;
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let rec: R = serde_json::from_value(v).map_err(|e| err(format!("record {i}: {e}")))?;
            validate(&rec).map_err(|e| err(format!("record {i}: {e}")))?;
            Ok(rec)
        })
        .collect()
}

/// Reads a JSON array of `{id, passage, question, options, label?}`.
pub fn load_mcqa_json(path: impl AsRef<Path>) -> Result<Vec<McqaExample>> {
    load_records(path.as_ref(), McqaExample::validate)
}

/// Reads a JSON array of `{premise, hypothesis, label}` with label 0/1/2.
pub fn load_pair_json(path: impl AsRef<Path>) -> Result<Vec<PairExample>> {
    load_records(path.as_ref(), |_: &PairExample| Ok(()))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let text = serde_json::to_string_pretty(records)?;
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn loads_well_formed_mcqa_file_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "d.json",
            r#"[{"id":"a","passage":["m: hi"],"question":"q?","options":["x","y"],"label":1},
                {"id":"b","passage":["s"],"question":"q","options":["x","y","z"]}]"#,
        );
        let ds = load_mcqa_json(&p).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds[0].id, "a");
        assert_eq!(ds[0].label, Some(1));
        assert_eq!(ds[1].label, None);
    }

    #[test]
    fn label_out_of_range_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "d.json",
            r#"[{"id":"a","passage":["s"],"question":"q","options":["x","y","z"],"label":0},
                {"id":"b","passage":["s"],"question":"q","options":["x","y","z"],"label":3}]"#,
        );
        let err = load_mcqa_json(&p).unwrap_err().to_string();
        assert!(err.contains("record 1"), "{err}");
        assert!(err.contains("label 3"), "{err}");
    }

    #[test]
    fn empty_array_and_malformed_input() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_mcqa_json(write(&dir, "e.json", "[]")).unwrap().is_empty());
        assert!(load_mcqa_json(write(&dir, "bad.json", "[{")).is_err());
        let missing = write(&dir, "m.json", r#"[{"id":"a","passage":["s"],"options":["x","y"]}]"#);
        let err = load_mcqa_json(missing).unwrap_err().to_string();
        assert!(err.contains("record 0") && err.contains("question"), "{err}");
    }

    #[test]
    fn pair_loader_cases() {
        let dir = tempfile::tempdir().unwrap();
        let ok = write(
            &dir,
            "p.json",
            r#"[{"premise":"a","hypothesis":"b","label":0},{"premise":"c","hypothesis":"d","label":2}]"#,
        );
        let ds = load_pair_json(ok).unwrap();
        assert_eq!(ds[1].label, NliLabel::Contradiction);
        let bad = write(&dir, "b.json", r#"[{"premise":"a","hypothesis":"b","label":3}]"#);
        let err = load_pair_json(bad).unwrap_err().to_string();
        assert!(err.contains("record 0"), "{err}");
        assert!(load_pair_json(write(&dir, "e.json", "[]")).unwrap().is_empty());
    }

    #[test]
    fn speaker_normalization_touches_only_the_passage() {
        let ex = McqaExample {
            id: "x".into(),
            passage: vec!["m: hello".into(), "W: bye".into()],
            question: "m: what".into(),
            options: vec!["a".into(), "b".into()],
            label: Some(0),
        };
        let n = ex.speaker_normalized();
        assert_eq!(n.passage, vec!["man: hello", "woman: bye"]);
        assert_eq!(n.question, "m: what");
    }
}
