mod common;

use std::path::Path;

use common::{synth, tiny_plan};
use mmm::data::{gen_synthetic_mcqa, gen_synthetic_nli, write_json, McqaExample, Vocabulary};
use mmm::model::prepare_mcqa;
use mmm::train::{DataSource, Pipeline, RunOptions};

#[test]
fn file_sources_train_exactly_like_their_synthetic_specs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut from_files = tiny_plan(4);
    for d in &mut from_files.datasets {
        let to_file = |src: &mut DataSource, tag: &str| {
            let DataSource::Synthetic(spec) = src else {
                unreachable!()
            };
            let name = format!("{}-{tag}.json", d.name);
            match d.kind {
                mmm::train::TaskKind::Mcqa => write_json(tmp.path().join(&name), &gen_synthetic_mcqa(spec).unwrap()),
                mmm::train::TaskKind::Pair => write_json(tmp.path().join(&name), &gen_synthetic_nli(spec).unwrap()),
            }
            .unwrap();
            *src = DataSource::File(name.into());
        };
        to_file(&mut d.train, "train");
        if let Some(dev) = &mut d.dev {
            to_file(dev, "dev");
        }
    }
    let mut a = Pipeline::<f64>::new(tiny_plan(4), Path::new(".")).unwrap();
    let mut b = Pipeline::<f64>::new(from_files, tmp.path()).unwrap();
    assert_eq!(a.model.vocab, b.model.vocab);
    a.run(&RunOptions::default()).unwrap();
    b.run(&RunOptions::default()).unwrap();
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn missing_files_are_load_errors() {
    let mut plan = tiny_plan(1);
    plan.datasets[1].train = DataSource::File("nowhere.json".into());
    let err = Pipeline::<f64>::new(plan, Path::new(".")).err().unwrap();
    assert!(matches!(err, mmm::MmmError::Load { .. }), "{err}");
    assert!(err.is_usage());
}

#[test]
fn speaker_normalization_reaches_the_vocabulary() {
    let with = Pipeline::<f64>::new(tiny_plan(1), Path::new(".")).unwrap();
    let mut plan = tiny_plan(1);
    for d in &mut plan.datasets {
        d.speaker_normalization = false;
    }
    let without = Pipeline::<f64>::new(plan, Path::new(".")).unwrap();
    let has = |v: &Vocabulary, t: &str| v.get(t).is_some();
    assert!(!has(&with.model.vocab, "w") && !has(&with.model.vocab, "m"));
    assert!(has(&with.model.vocab, "woman") && has(&with.model.vocab, "man"));
    assert!(has(&without.model.vocab, "w") || has(&without.model.vocab, "m"));
}

#[test]
fn window_budget_follows_the_packing_formula() {
    // |Q| = 4, longest option 3: budget 20 - 4 - 3 - 3 = 10, overlap 5
    let ex = McqaExample {
        id: "x".into(),
        passage: vec!["a b c d e f g h i j k l m n o p q r s t u v".into()],
        question: "what is it ?".into(),
        options: vec!["a b".into(), "c d e".into()],
        label: Some(0),
    };
    let tokens: Vec<String> = "a b c d e f g h i j k l m n o p q r s t u v what is it ?"
        .split(' ')
        .map(String::from)
        .collect();
    let vocab = Vocabulary::build(&tokens, 1);
    let prep = prepare_mcqa(&ex, &vocab, 20).unwrap();
    // 22 passage tokens: [0,10) [5,15) [10,20) [15,22)
    assert_eq!(prep.snippets.len(), 4);
    let a = vocab.get("a").unwrap();
    let f = vocab.get("f").unwrap();
    for (k, first) in [(0, a), (1, f)] {
        assert_eq!(prep.snippets[k][0].token_ids[1], first);
    }
    assert!(prepare_mcqa(&ex, &vocab, 10).unwrap_err().is_usage());
}

#[test]
fn synthetic_specs_deserialize_with_defaults() {
    let s: mmm::data::SyntheticSpec =
        serde_json::from_str(r#"{"seed":1,"count":2,"vocab_pool":6,"sentences":3,"options":3,"table_id":1}"#).unwrap();
    assert_eq!(s, synth(1, 2, 3));
    assert_eq!(s.passage_distractors(), 2);
}
