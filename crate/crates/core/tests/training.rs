#![allow(clippy::single_range_in_vec_init)] // one-window splits are meant

mod common;

use std::fs;

use common::{examples, model, tiny_plan, vocab_for};
use mmm::data::speaker_normalize;
use mmm::man::ClassifierKind;
use mmm::model::{loss, sliding_window_split, Model};
use mmm::train::{
    load_checkpoint, save_checkpoint, DatasetMixture, Pipeline, RunOptions, RunStatus, StageKind, TrainPlan,
};
use mmm::MmmError;
use mmm_autodiff::{clip_global_norm, Grads, LrSchedule, ParamStore, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn uniform_logits_cost_ln_n() {
    for n in 2..=6 {
        for v in [0.0f64, 1.7, -40.0] {
            assert_eq!(loss(&vec![v; n], 0).unwrap(), (n as f64).ln());
        }
    }
}

#[test]
fn schedule_anchor_points_are_exact() {
    let s = LrSchedule::new(3e-5, 1000, 0.1).unwrap();
    assert_eq!(s.lr_at(0).unwrap(), 0.0);
    assert_eq!(s.lr_at(100).unwrap(), 3e-5);
    assert_eq!(s.lr_at(1000).unwrap(), 0.0);
}

#[test]
fn clipping_scales_by_max_over_norm() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::zeros(&[2]));
    let b = store.add("b", Tensor::zeros(&[1]));
    let mut grads = Grads::zeros_like(&store);
    grads.accumulate(a, &[3.0, 0.0], 1.0).unwrap();
    grads.accumulate(b, &[4.0], 1.0).unwrap();
    let untouched = grads.clone();
    assert_eq!(clip_global_norm(&mut grads.clone(), None), 5.0);
    assert_eq!(clip_global_norm(&mut grads.clone(), Some(10.0)), 5.0);
    let norm = clip_global_norm(&mut grads, Some(1.0));
    assert_eq!(norm, 5.0);
    let scale = 1.0 / 5.0;
    assert_eq!(grads.get(a).unwrap(), &[3.0 * scale, 0.0]);
    assert_eq!(grads.get(b).unwrap(), &[4.0 * scale]);
    let mut same = untouched.clone();
    clip_global_norm(&mut same, Some(5.0));
    assert_eq!(same.get(b), untouched.get(b));
}

#[test]
fn speaker_tags_expand_like_the_sample_dialogue() {
    assert_eq!(speaker_normalize("m: How would he know?"), "man: How would he know?");
    assert_eq!(speaker_normalize("W: Yes."), "woman: Yes.");
    assert_eq!(speaker_normalize("f: Fine."), "woman: Fine.");
}

#[test]
fn window_splits_at_the_default_length() {
    let split = |n| sliding_window_split(n, 512, 256).unwrap();
    assert_eq!(split(100), [0..100]);
    assert_eq!(split(512), [0..512]);
    assert_eq!(split(768), vec![0..512, 256..768]);
    assert_eq!(split(769), vec![0..512, 256..768, 512..769]);
}

#[test]
fn proportional_sampling_matches_dataset_sizes() {
    let mix = DatasetMixture::new(&[97687, 10197]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws = 100_000;
    let first = (0..draws).filter(|_| mix.sample_task(&mut rng) == 0).count();
    let freq = first as f64 / draws as f64;
    assert!((freq - 0.90548).abs() < 0.005, "{freq}");
    assert!((mix.probabilities()[0] - 97687.0 / 107884.0).abs() < 1e-15);
}

fn params_of<T: Real>(p: &Pipeline<T>) -> Vec<(String, Vec<f64>)> {
    p.model
        .store
        .iter()
        .map(|(_, q)| (q.name.clone(), q.value.data().iter().map(|x| x.as_f64()).collect()))
        .collect()
}

fn run(plan: TrainPlan, opts: &RunOptions) -> Pipeline<f64> {
    let mut p = Pipeline::<f64>::new(plan, std::path::Path::new(".")).unwrap();
    assert_eq!(p.run(opts).unwrap(), RunStatus::Finished);
    p
}

#[test]
fn training_is_deterministic_per_seed() {
    let a = run(tiny_plan(5), &RunOptions::default());
    let b = run(tiny_plan(5), &RunOptions::default());
    let c = run(tiny_plan(6), &RunOptions::default());
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(params_of(&a), params_of(&b));
    assert_ne!(a.metrics, c.metrics);
    // 16 pairs / 4, then 2 epochs over the larger 12-example set / 4
    assert_eq!(a.reports.len(), 2);
    assert_eq!(a.reports[0].steps, 4);
    assert_eq!(a.reports[1].steps, 6);
    assert!(a.metrics.iter().all(|r| r.loss.is_finite() && r.lr >= 0.0));
}

#[test]
fn stages_keep_only_the_heads_they_use() {
    let p = run(tiny_plan(5), &RunOptions::default());
    assert!(p.model.choice.is_some());
    assert!(p.model.pair.is_none());
    assert!(p.model.store.iter().all(|(_, q)| !q.name.starts_with("pair.")));
}

#[test]
fn mid_stage_resume_reproduces_the_uninterrupted_run() {
    let whole = run(tiny_plan(8), &RunOptions::default());
    let tmp = tempfile::tempdir().unwrap();
    // pause inside the coarse stage and again inside the multi-task stage
    for budget in [2, 7] {
        let mut p = Pipeline::<f64>::new(tiny_plan(8), std::path::Path::new(".")).unwrap();
        let paused = p
            .run(&RunOptions {
                step_budget: Some(budget),
                ..RunOptions::default()
            })
            .unwrap();
        assert_eq!(paused, RunStatus::Paused);
        let path = tmp.path().join(format!("mid{budget}.ckpt"));
        p.save(&path).unwrap();
        drop(p);
        let mut resumed = Pipeline::<f64>::resume(&path, std::path::Path::new(".")).unwrap();
        assert_eq!(resumed.steps_taken(), budget as usize);
        assert_eq!(resumed.run(&RunOptions::default()).unwrap(), RunStatus::Finished);
        assert_eq!(resumed.metrics, whole.metrics);
        assert_eq!(params_of(&resumed), params_of(&whole));
        assert_eq!(resumed.reports, whole.reports);
    }
}

fn fresh_model<T: Real>() -> (Model<T>, Vec<mmm::data::McqaExample>) {
    let exs = examples(21, 5, 3);
    let m = model::<T>(ClassifierKind::Man { steps: 2 }, vocab_for(&exs), 64, 21);
    (m, exs)
}

fn round_trip<T: Real>() {
    let (m, exs) = fresh_model::<T>();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.ckpt");
    save_checkpoint(&path, &m, None, None).unwrap();
    let back = load_checkpoint::<T>(&path).unwrap();
    assert!(back.optimizer.is_none());
    assert_eq!(back.model.vocab, m.vocab);
    assert_eq!(back.model.config, m.config);
    for ex in &exs {
        let a = m.score_options(&m.prepare_mcqa(ex).unwrap()).unwrap();
        let b = back.model.score_options(&back.model.prepare_mcqa(ex).unwrap()).unwrap();
        let bits = |v: &[T]| v.iter().map(|x| x.as_f64().to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
    assert_eq!(mmm::train::checkpoint_precision(&path).unwrap(), T::NAME);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    round_trip::<f64>();
    round_trip::<f32>();
}

#[test]
fn pipeline_checkpoint_loads_as_a_plain_model() {
    let p = run(tiny_plan(3), &RunOptions::default());
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("p.ckpt");
    p.save(&path).unwrap();
    let ck = load_checkpoint::<f64>(&path).unwrap();
    assert!(ck.state.is_some());
    assert_eq!(ck.model.store.num_scalars(), p.model.store.num_scalars());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let (m, _) = fresh_model::<f64>();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.ckpt");
    save_checkpoint(&path, &m, None, None).unwrap();
    let good = fs::read(&path).unwrap();
    let is_ck_err = |bytes: &[u8]| {
        let p = tmp.path().join("bad.ckpt");
        fs::write(&p, bytes).unwrap();
        matches!(load_checkpoint::<f64>(&p), Err(MmmError::Checkpoint(_)))
    };
    let mut flipped = good.clone();
    let last = flipped.len() - 3;
    flipped[last] ^= 0x40;
    assert!(is_ck_err(&flipped), "flipped parameter byte");
    assert!(is_ck_err(&good[..good.len() - 8]), "truncated");
    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(is_ck_err(&magic), "bad magic");
    assert!(is_ck_err(&good[..4]), "short header");
    // a wrong precision request is an error, not a silent cast
    let (m32, _) = fresh_model::<f32>();
    save_checkpoint(&path, &m32, None, None).unwrap();
    assert!(load_checkpoint::<f64>(&path).is_err());
}

#[test]
fn invalid_plans_are_usage_errors() {
    let mut p = tiny_plan(1);
    p.stages[0].kind = StageKind::SingleTask;
    p.stages[0].datasets = vec!["written".into(), "dialogue".into()];
    let err = Pipeline::<f64>::new(p, std::path::Path::new(".")).err().unwrap();
    assert!(err.is_usage(), "{err}");

    let mut p = tiny_plan(1);
    p.stages[1].datasets.push("missing".into());
    assert!(Pipeline::<f64>::new(p, std::path::Path::new("."))
        .err()
        .unwrap()
        .is_usage());
}
