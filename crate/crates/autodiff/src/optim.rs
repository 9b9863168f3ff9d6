use serde::{Deserialize, Serialize};

use crate::error::{shape_err, AutodiffError, Result};
use crate::params::{Grads, ParamStore};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates aligned with the slots of a parameter
/// store, plus the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub first: Vec<Option<Vec<T>>>,
    pub second: Vec<Option<Vec<T>>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || -> Vec<Option<Vec<T>>> {
            (0..store.slot_count())
                .map(|i| {
                    let id = crate::params::ParamId(i);
                    store.contains(id).then(|| vec![T::zero(); store.get(id).numel()])
                })
                .collect()
        };
        Self {
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }
}

impl Adam {
    /// Bias-corrected Adam update of every live parameter.
    pub fn step<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        grads: &Grads<T>,
        state: &mut OptimizerState<T>,
        lr: f64,
    ) -> Result<()> {
        // validate everything before touching any parameter
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.value.numel())).collect();
        for &(id, n) in &ids {
            let g = grads
                .get(id)
                .ok_or_else(|| AutodiffError::Usage(format!("missing gradient for parameter {}", id.0)))?;
            let m = state.first.get(id.0).and_then(|m| m.as_ref());
            let v = state.second.get(id.0).and_then(|v| v.as_ref());
            match (m, v) {
                (Some(m), Some(v)) if m.len() == n && v.len() == n && g.len() == n => {}
                _ => return shape_err("adam_step", &[n], &[g.len()]),
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let bc1 = T::one() - T::of(self.beta1.powi(t));
        let bc2 = T::one() - T::of(self.beta2.powi(t));
        let lr = T::of(lr);
        let eps = T::of(self.eps);
        for (id, _) in ids {
            let g = grads.get(id).expect("validated");
            let m = state.first[id.0].as_mut().expect("validated");
            let v = state.second[id.0].as_mut().expect("validated");
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.bump_version();
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`
/// (`None` disables clipping). Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut Grads<T>, max_norm: Option<f64>) -> T {
    let norm = grads.global_norm();
    if let Some(max) = max_norm {
        let max = T::of(max);
        if norm > max {
            grads.scale(max / norm);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(x: f64) -> (ParamStore<f64>, crate::params::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(x));
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut store, id) = scalar_store(0.7);
        let mut state = OptimizerState::new(&store);
        let grads = Grads::zeros_like(&store);
        Adam::default().step(&mut store, &grads, &mut state, 0.1).unwrap();
        assert_eq!(store.get(id).data(), &[0.7]);
        assert_eq!(state.step, 1);
        assert_eq!(store.version(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.0, -0.02, 1e3] {
            let (mut store, id) = scalar_store(1.0);
            let mut state = OptimizerState::new(&store);
            let mut grads = Grads::zeros_like(&store);
            grads.accumulate(id, &[g], 1.0).unwrap();
            let lr = 0.01;
            Adam::default().step(&mut store, &grads, &mut state, lr).unwrap();
            let delta = store.get(id).data()[0] - 1.0;
            assert!((delta + lr * g.signum()).abs() < lr * 1e-6, "{g}: {delta}");
        }
    }

    #[test]
    fn two_steps_match_scalar_oracle() {
        // hand-rolled scalar Adam
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.05);
        let gs = [0.4, -1.3];
        let (mut x, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for (t, g) in gs.iter().enumerate() {
            let t = t as i32 + 1;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        let (mut store, id) = scalar_store(2.0);
        let mut state = OptimizerState::new(&store);
        for g in gs {
            let mut grads = Grads::zeros_like(&store);
            grads.accumulate(id, &[g], 1.0).unwrap();
            Adam::default().step(&mut store, &grads, &mut state, lr).unwrap();
        }
        assert!((store.get(id).data()[0] - x).abs() < 1e-15);
        assert_eq!(state.step, 2);
    }

    #[test]
    fn shape_mismatch_is_rejected_without_side_effects() {
        let (mut store, _) = scalar_store(1.0);
        let mut state = OptimizerState::new(&store);
        let other = {
            let mut s = ParamStore::<f64>::new();
            s.add("x", Tensor::zeros(&[3]));
            s
        };
        let grads = Grads::zeros_like(&other);
        assert!(Adam::default().step(&mut store, &grads, &mut state, 0.1).is_err());
        assert_eq!(state.step, 0);
    }

    #[test]
    fn clipping_examples() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::zeros(&[2]));
        let fresh = |v: [f64; 2]| {
            let mut g = Grads::zeros_like(&store);
            g.accumulate(a, &v, 1.0).unwrap();
            g
        };
        let mut g = fresh([6.0, 8.0]);
        assert_eq!(clip_global_norm(&mut g, Some(5.0)), 10.0);
        assert_eq!(g.get(a).unwrap(), &[3.0, 4.0]);
        let mut g = fresh([1.8, 2.4]);
        clip_global_norm(&mut g, Some(5.0));
        assert_eq!(g.get(a).unwrap(), &[1.8, 2.4]);
        let mut g = fresh([60.0, 80.0]);
        clip_global_norm(&mut g, None);
        assert_eq!(g.get(a).unwrap(), &[60.0, 80.0]);
    }
}
