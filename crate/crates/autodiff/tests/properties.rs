use mmm_autodiff::{
    clip_global_norm, cross_entropy_value, softmax_slice, Adam, Grads, Graph, LrSchedule, OptimizerState, ParamStore,
    Tensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, 1..12)
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(x in logits()) {
        let p = softmax_slice(&x, None).unwrap();
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_ignores_a_common_shift(x in logits(), c in -50.0f64..50.0) {
        let p = softmax_slice(&x, None).unwrap();
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let q = softmax_slice(&shifted, None).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_renormalizes_over_kept_entries(
        (x, keep) in logits().prop_flat_map(|x| {
            let n = x.len();
            (Just(x), prop::collection::vec(any::<bool>(), n))
        })
    ) {
        prop_assume!(keep.iter().any(|&k| k));
        let p = softmax_slice(&x, Some(&keep)).unwrap();
        let kept: Vec<f64> = x.iter().zip(&keep).filter(|(_, &k)| k).map(|(v, _)| *v).collect();
        let q = softmax_slice(&kept, None).unwrap();
        let mut qi = q.iter();
        for (v, &k) in p.iter().zip(&keep) {
            if k {
                prop_assert!((v - qi.next().unwrap()).abs() < 1e-12);
            } else {
                prop_assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn graph_softmax_agrees_with_slice_softmax(x in logits()) {
        let mut g = Graph::<f64>::new();
        let v = g.leaf(Tensor::vector(x.clone()));
        let s = g.softmax(v).unwrap();
        let want = softmax_slice(&x, None).unwrap();
        prop_assert_eq!(g.value(s), want.as_slice());
    }

    #[test]
    fn cross_entropy_is_nonnegative_and_matches_log_softmax(x in logits(), pick in 0usize..12) {
        let label = pick % x.len();
        let ce = cross_entropy_value(&x, label).unwrap();
        let p = softmax_slice(&x, None).unwrap();
        prop_assert!(ce >= 0.0);
        if p[label] > 1e-300 {
            prop_assert!((ce + p[label].ln()).abs() < 1e-9 * ce.abs().max(1.0));
        }
    }

    #[test]
    fn clipping_bounds_the_norm_and_keeps_the_direction(
        g in prop::collection::vec(-100.0f64..100.0, 1..20),
        max in prop::option::of(0.01f64..50.0),
    ) {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::zeros(&[g.len()]));
        let mut grads = Grads::zeros_like(&store);
        grads.accumulate(id, &g, 1.0).unwrap();
        let before = grads.global_norm();
        let reported = clip_global_norm(&mut grads, max);
        prop_assert_eq!(reported, before);
        let after = grads.global_norm();
        prop_assert!(after <= before + 1e-12);
        if let Some(m) = max {
            prop_assert!(after <= m + 1e-9);
        } else {
            prop_assert_eq!(after, before);
        }
        // nonnegative multiple of the input
        let out = grads.get(id).unwrap();
        let scale = if before > 0.0 { after / before } else { 1.0 };
        prop_assert!(scale >= 0.0);
        for (o, i) in out.iter().zip(&g) {
            prop_assert!((o - scale * i).abs() <= 1e-9 * i.abs().max(1.0));
        }
    }

    #[test]
    fn schedule_stays_within_zero_and_peak(
        lr in 1e-6f64..1.0,
        total in 1u64..5000,
        warm in 0.01f64..0.99,
        frac in 0.0f64..=1.0,
    ) {
        let s = LrSchedule::new(lr, total, warm).unwrap();
        let step = ((total as f64) * frac) as u64;
        let v = s.lr_at(step).unwrap();
        prop_assert!((0.0..=lr * (1.0 + 1e-12)).contains(&v));
        prop_assert_eq!(s.lr_at(0).unwrap(), 0.0);
        prop_assert_eq!(s.lr_at(total).unwrap(), 0.0);
        prop_assert!(s.lr_at(total + 1).is_err());
    }
}

fn adam_run(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::randn(&[3, 4], 1.0, &mut rng));
    let b = store.add("b", Tensor::randn(&[4], 1.0, &mut rng));
    let target = Tensor::randn(&[3], 1.0, &mut rng);
    let mut state = OptimizerState::new(&store);
    let adam = Adam::default();
    let sched = LrSchedule::new(0.05, 30, 0.1).unwrap();
    for step in 0..30 {
        let mut g = Graph::<f64>::new();
        let av = g.param(&store, a);
        let bv = g.param(&store, b);
        let y = g.matmul(av, bv).unwrap();
        let t = g.constant(target.clone());
        let d = g.sub(y, t).unwrap();
        let sq = g.mul(d, d).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        let mut grads = Grads::zeros_like(&store);
        g.accumulate_param_grads(&mut grads, 1.0).unwrap();
        clip_global_norm(&mut grads, Some(1.0));
        adam.step(&mut store, &grads, &mut state, sched.lr_at(step + 1).unwrap())
            .unwrap();
    }
    store.iter().flat_map(|(_, p)| p.value.data().to_vec()).collect()
}

#[test]
fn adam_training_is_bitwise_deterministic() {
    assert_eq!(adam_run(4), adam_run(4));
    assert_ne!(adam_run(4), adam_run(5));
}

#[test]
fn adam_reduces_a_quadratic() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::vector(vec![3.0, -2.0]));
    let mut state = OptimizerState::new(&store);
    let loss_at = |s: &ParamStore<f64>| s.get(x).data().iter().map(|v| v * v).sum::<f64>();
    let start = loss_at(&store);
    for _ in 0..200 {
        let mut grads = Grads::zeros_like(&store);
        let g: Vec<f64> = store.get(x).data().iter().map(|v| 2.0 * v).collect();
        grads.accumulate(x, &g, 1.0).unwrap();
        Adam::default().step(&mut store, &grads, &mut state, 0.05).unwrap();
    }
    assert!(loss_at(&store) < 1e-2 * start);
}
