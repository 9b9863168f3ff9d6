mod common;

use common::{examples, model, vocab_for};
use mmm::data::{pack_sequence, tokenize, EncodedSequence, McqaExample};
use mmm::man::{build_memories, init_state, man_forward, ChoiceHead, ClassifierKind, ManParams};
use mmm::model::{loss, Model};
use mmm_autodiff::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const KINDS: [ClassifierKind; 4] = [
    ClassifierKind::Fcnn,
    ClassifierKind::Man { steps: 1 },
    ClassifierKind::Man { steps: 2 },
    ClassifierKind::Man { steps: 5 },
];

fn setup(kind: ClassifierKind, seed: u64) -> (Model<f64>, Vec<McqaExample>) {
    let exs = examples(seed, 6, 3);
    let m = model(kind, vocab_for(&exs), 64, seed);
    (m, exs)
}

fn man_head(m: &Model<f64>) -> &ManParams {
    match m.choice.as_ref().unwrap() {
        ChoiceHead::Man(p) => p,
        ChoiceHead::Fcnn(_) => panic!("expected a multi-step head"),
    }
}

#[test]
fn attention_weights_are_distributions_and_s0_is_a_convex_combination() {
    for steps in [1, 2, 5] {
        let (m, exs) = setup(ClassifierKind::Man { steps }, 40 + steps as u64);
        let head = man_head(&m);
        for ex in &exs {
            let prep = m.prepare_mcqa(ex).unwrap();
            for seq in &prep.snippets[0] {
                let mut g = Graph::new();
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let rows = m.encoder.forward(&mut g, &m.store, seq, false, &mut rng).unwrap();
                let mem = build_memories(&mut g, rows, &seq.roles).unwrap();
                let vars = head.bind(&mut g, &m.store).unwrap();
                let (_, trace) = man_forward(&mut g, &mem, &vars).unwrap();
                let trace = trace.read(&g);
                assert_eq!(trace.steps.len(), steps.max(2) - 1);

                let alpha = &trace.alpha;
                assert!(alpha.iter().all(|&a| a >= 0.0));
                assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for st in &trace.steps {
                    assert!(st.beta.iter().all(|&b| b >= 0.0));
                    assert!((st.beta.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }

                // s0 is the alpha-weighted mean of passage rows
                let passage = g.tensor(mem.passage);
                let (p, d) = passage.dims2().unwrap();
                let mut g0 = Graph::new();
                let pv = g0.constant(passage.clone());
                let w1 = g0.param(&m.store, head.w1);
                let (s0, _) = init_state(&mut g0, pv, w1).unwrap();
                let s0 = g0.value(s0).to_vec();
                for (j, &sj) in s0.iter().enumerate().take(d) {
                    let col: Vec<f64> = (0..p).map(|i| passage.at(i, j)).collect();
                    let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mix: f64 = (0..p).map(|i| alpha[i] * col[i]).sum();
                    assert!((sj - mix).abs() < 1e-12);
                    assert!(sj >= lo - 1e-12 && sj <= hi + 1e-12);
                }
            }
        }
    }
}

#[test]
fn zero_steps_is_bitwise_the_feed_forward_head() {
    let exs = examples(3, 6, 3);
    let vocab = vocab_for(&exs);
    let a: Model<f64> = model(ClassifierKind::Man { steps: 0 }, vocab.clone(), 64, 3);
    let b: Model<f64> = model(ClassifierKind::Fcnn, vocab, 64, 3);
    assert!(matches!(a.choice, Some(ChoiceHead::Fcnn(_))));
    for ex in &exs {
        let la = a.score_options(&a.prepare_mcqa(ex).unwrap()).unwrap();
        let lb = b.score_options(&b.prepare_mcqa(ex).unwrap()).unwrap();
        assert_eq!(la, lb);
    }
}

fn permuted(ex: &McqaExample, perm: &[usize]) -> McqaExample {
    let mut out = ex.clone();
    out.options = perm.iter().map(|&i| ex.options[i].clone()).collect();
    out.label = ex.label.map(|l| perm.iter().position(|&i| i == l).unwrap());
    out
}

#[test]
fn permuting_options_permutes_logits_exactly() {
    for kind in KINDS {
        let (m, exs) = setup(kind, 7);
        for ex in &exs {
            let base = m.score_options(&m.prepare_mcqa(ex).unwrap()).unwrap();
            for perm in [[1, 2, 0], [2, 1, 0], [0, 2, 1]] {
                let p = m.score_options(&m.prepare_mcqa(&permuted(ex, &perm)).unwrap()).unwrap();
                let want: Vec<f64> = perm.iter().map(|&i| base[i]).collect();
                assert_eq!(p, want, "{kind:?}");
            }
        }
    }
}

#[test]
fn duplicate_options_get_equal_logits() {
    for kind in KINDS {
        let (m, exs) = setup(kind, 8);
        for ex in &exs {
            let mut dup = ex.clone();
            dup.options[2] = dup.options[0].clone();
            let l = m.score_options(&m.prepare_mcqa(&dup).unwrap()).unwrap();
            assert_eq!(l[0], l[2], "{kind:?}");
        }
    }
}

#[test]
fn zero_output_weights_give_uniform_loss() {
    for steps in [1, 2, 5] {
        let (mut m, exs) = setup(ClassifierKind::Man { steps }, 9);
        let w3 = man_head(&m).w3;
        let n = m.store.get(w3).numel();
        *m.store.get_mut(w3) = Tensor::zeros(&[n]);
        for ex in &exs {
            let logits = m.score_options(&m.prepare_mcqa(ex).unwrap()).unwrap();
            assert!(logits.iter().all(|&l| l == 0.0));
            assert_eq!(loss(&logits, ex.label.unwrap()).unwrap(), 3f64.ln());
        }
    }
}

#[test]
fn padding_leaves_real_positions_unchanged() {
    let (m, exs) = setup(ClassifierKind::Man { steps: 2 }, 10);
    for ex in &exs {
        let seq = m.prepare_mcqa(ex).unwrap().snippets[0][1].clone();
        let run = |s: &EncodedSequence| {
            let mut g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let rows = m.encoder.forward(&mut g, &m.store, s, false, &mut rng).unwrap();
            g.tensor(rows)
        };
        let short = run(&seq);
        let long = run(&seq.padded(7));
        let (l, d) = short.dims2().unwrap();
        assert_eq!(long.dims2().unwrap(), (l + 7, d));
        for i in 0..l {
            for j in 0..d {
                assert!((short.at(i, j) - long.at(i, j)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn encoder_rows_are_standardized_at_init() {
    // post-norm with unit gain and zero bias
    let (m, exs) = setup(ClassifierKind::Fcnn, 11);
    let seq = m.prepare_mcqa(&exs[0]).unwrap().snippets[0][0].clone();
    let h = m.encoder.encode(&m.store, &seq).unwrap().matrix;
    let (d, l) = h.dims2().unwrap();
    for c in 0..l {
        let col = h.column(c);
        let mean = col.iter().sum::<f64>() / d as f64;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }
}

/// The direct path: one packed sequence per option over the whole passage.
fn direct_logits(m: &Model<f64>, ex: &McqaExample) -> Vec<f64> {
    let passage: Vec<String> = ex.passage.iter().flat_map(|s| tokenize(s)).collect();
    let question = tokenize(&ex.question);
    let seqs: Vec<_> = ex
        .options
        .iter()
        .map(|o| {
            pack_sequence(&passage, &question, &tokenize(o), &m.vocab, m.max_len())
                .unwrap()
                .trimmed()
        })
        .collect();
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let v = m.snippet_logits(&mut g, &seqs, false, &mut rng).unwrap();
    g.value(v).to_vec()
}

#[test]
fn sliding_window_equals_direct_path_for_short_passages() {
    for kind in KINDS {
        let (m, exs) = setup(kind, 12);
        for ex in &exs {
            let prep = m.prepare_mcqa(ex).unwrap();
            assert_eq!(prep.snippets.len(), 1);
            assert_eq!(m.score_options(&prep).unwrap(), direct_logits(&m, ex));
        }
    }
}

#[test]
fn long_passages_sum_their_snippet_logits() {
    let exs = examples(13, 4, 8);
    let m: Model<f64> = model(ClassifierKind::Man { steps: 2 }, vocab_for(&exs), 28, 13);
    for ex in &exs {
        let prep = m.prepare_mcqa(ex).unwrap();
        assert!(prep.snippets.len() >= 2);
        let mut want = vec![0.0; 3];
        for options in &prep.snippets {
            let mut g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let v = m.snippet_logits(&mut g, options, false, &mut rng).unwrap();
            for (w, x) in want.iter_mut().zip(g.value(v)) {
                *w += x;
            }
        }
        assert_eq!(m.score_options(&prep).unwrap(), want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn equivariance_holds_for_random_models(seed in 0u64..1000, steps in 0usize..4, rot in 1usize..3) {
        let (m, exs) = setup(ClassifierKind::from_steps(steps), seed);
        let ex = &exs[0];
        let perm: Vec<usize> = (0..3).map(|i| (i + rot) % 3).collect();
        let base = m.score_options(&m.prepare_mcqa(ex).unwrap()).unwrap();
        let p = m.score_options(&m.prepare_mcqa(&permuted(ex, &perm)).unwrap()).unwrap();
        let want: Vec<f64> = perm.iter().map(|&i| base[i]).collect();
        prop_assert_eq!(p, want);
    }
}
