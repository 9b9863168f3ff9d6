//! Central finite-difference gradient checks (64-bit only).

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Below this combined magnitude the error is measured in absolute terms.
/// Exactly-zero gradients (e.g. a term shared by every softmax input) come
/// out of central differences as roundoff of order 1e-11.
pub const ERROR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a| + |n|, ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(ERROR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input or parameter index, flat coordinate)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            worst: None,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            coords_checked: 0,
        }
    }

    fn record(&mut self, at: (usize, usize), analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.coords_checked += 1;
        if self.worst.is_none() || err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst = Some(at);
            self.analytic_at_worst = analytic;
            self.numeric_at_worst = numeric;
        }
    }

    pub fn merge(mut self, other: &GradCheckReport) -> Self {
        self.coords_checked += other.coords_checked;
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
            self.analytic_at_worst = other.analytic_at_worst;
            self.numeric_at_worst = other.numeric_at_worst;
        }
        self
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return shape_err("grad_check", g.shape(out), &[1]);
    }
    Ok(g.scalar(out))
}

/// Reverse-mode gradients of the scalar `f` with respect to each input.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars.iter().map(|&v| g.grad_or_zeros(v)).collect())
}

/// Compares supplied gradients against central differences of `f`.
pub fn compare_gradients<F>(analytic: &[Vec<f64>], f: &F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut report = GradCheckReport::new();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        if grad.len() != inputs[i].numel() {
            return shape_err("grad_check", &[grad.len()], inputs[i].shape());
        }
        for (j, &a) in grad.iter().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = evaluate(f, &work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = evaluate(f, &work)?;
            work[i].data_mut()[j] = orig;
            report.record((i, j), a, (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Gradient check of a scalar function of graph inputs.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    compare_gradients(&analytic, &f, inputs, eps)
}

/// Gradient check of a scalar function of every parameter in `store`.
///
/// With `max_coords_per_param = Some(k)`, at most `k` evenly spaced
/// coordinates of each parameter are perturbed.
pub fn grad_check_params<F>(
    store: &mut ParamStore<f64>,
    f: F,
    eps: f64,
    max_coords_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.backward(out)?;
    let mut grads = Grads::zeros_like(store);
    g.accumulate_param_grads(&mut grads, 1.0)?;
    drop(g);

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        Ok(g.scalar(out))
    };
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let mut report = GradCheckReport::new();
    for id in ids {
        let n = store.get(id).numel();
        let coords: Vec<usize> = match max_coords_per_param {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        let analytic = grads.get(id).expect("live parameter").to_vec();
        for j in coords {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig;
            report.record((id.0, j), analytic[j], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tanh_chain(g: &mut Graph<f64>, v: &[Var]) -> Result<Var> {
        let a = g.tanh(v[0]);
        let b = g.mul(a, v[0])?;
        let c = g.tanh(b);
        Ok(g.sum(c))
    }

    fn input() -> Vec<Tensor<f64>> {
        vec![Tensor::vector(vec![0.3, -1.2, 0.8, 2.0])]
    }

    #[test]
    fn correct_tanh_chain_passes() {
        let r = grad_check(tanh_chain, &input(), DEFAULT_EPS).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
        assert_eq!(r.coords_checked, 4);
    }

    #[test]
    fn doubled_gradient_reports_one_third() {
        let mut analytic = analytic_gradients(&tanh_chain, &input()).unwrap();
        for g in &mut analytic[0] {
            *g *= 2.0;
        }
        let r = compare_gradients(&analytic, &tanh_chain, &input(), DEFAULT_EPS).unwrap();
        assert!((r.max_rel_err - 1.0 / 3.0).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn zero_function_has_zero_error() {
        let zero = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            let s = g.sum(v[0]);
            Ok(g.scale(s, 0.0))
        };
        let r = grad_check(zero, &input(), DEFAULT_EPS).unwrap();
        assert_eq!(r.max_rel_err, 0.0);
    }
}
