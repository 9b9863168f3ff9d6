//! Gated recurrent unit cell built from graph primitives.
//!
//! Convention (update gate blends the candidate in):
//!
//! ```text
//! z   = sigmoid(W_z x + U_z s + b_z)
//! r   = sigmoid(W_r x + U_r s + b_r)
//! h~  = tanh(W_h x + U_h (r * s) + b_h)
//! out = (1 - z) * s + z * h~
//! ```

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Parameter handles of one GRU cell with state and input width `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub dim: usize,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
}

/// The same parameters bound to nodes of one graph.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

impl GruParams {
    /// Registers `prefix.{w,u,b}_{z,r,h}`; weights `N(0, std^2)`, biases zero.
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut mat = |store: &mut ParamStore<T>, name: &str| {
            store.add(format!("{prefix}.{name}"), Tensor::randn(&[dim, dim], std, rng))
        };
        let w_z = mat(store, "w_z");
        let u_z = mat(store, "u_z");
        let w_r = mat(store, "w_r");
        let u_r = mat(store, "u_r");
        let w_h = mat(store, "w_h");
        let u_h = mat(store, "u_h");
        let b_z = store.add(format!("{prefix}.b_z"), Tensor::zeros(&[dim]));
        let b_r = store.add(format!("{prefix}.b_r"), Tensor::zeros(&[dim]));
        let b_h = store.add(format!("{prefix}.b_h"), Tensor::zeros(&[dim]));
        Self {
            dim,
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_h,
            u_h,
            b_h,
        }
    }

    pub fn ids(&self) -> [ParamId; 9] {
        [
            self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_h, self.u_h, self.b_h,
        ]
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> GruVars {
        GruVars {
            w_z: g.param(store, self.w_z),
            u_z: g.param(store, self.u_z),
            b_z: g.param(store, self.b_z),
            w_r: g.param(store, self.w_r),
            u_r: g.param(store, self.u_r),
            b_r: g.param(store, self.b_r),
            w_h: g.param(store, self.w_h),
            u_h: g.param(store, self.u_h),
            b_h: g.param(store, self.b_h),
        }
    }
}

fn gate<T: Real>(g: &mut Graph<T>, w: Var, x: Var, u: Var, s: Var, b: Var) -> Result<Var> {
    let wx = g.matmul(w, x)?;
    let us = g.matmul(u, s)?;
    let sum = g.add(wx, us)?;
    g.add(sum, b)
}

/// One GRU update of state `s_prev` with input `x` (both `[d]` vectors).
pub fn gru_cell<T: Real>(g: &mut Graph<T>, s_prev: Var, x: Var, p: &GruVars) -> Result<Var> {
    let d = match g.shape(s_prev) {
        [d] => *d,
        s => return shape_err("gru_cell", s, &[0]),
    };
    if g.shape(x) != [d] || g.shape(p.w_z) != [d, d] || g.shape(p.b_z) != [d] {
        return shape_err("gru_cell", g.shape(s_prev), g.shape(x));
    }
    let z_pre = gate(g, p.w_z, x, p.u_z, s_prev, p.b_z)?;
    let z = g.sigmoid(z_pre);
    let r_pre = gate(g, p.w_r, x, p.u_r, s_prev, p.b_r)?;
    let r = g.sigmoid(r_pre);
    let rs = g.mul(r, s_prev)?;
    let h_pre = gate(g, p.w_h, x, p.u_h, rs, p.b_h)?;
    let h = g.tanh(h_pre);
    let keep = g.affine(z, -T::one(), T::one());
    let old = g.mul(keep, s_prev)?;
    let new = g.mul(z, h)?;
    g.add(old, new)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind_constants(g: &mut Graph<f64>, fill: impl Fn(&str) -> Tensor<f64>) -> GruVars {
        GruVars {
            w_z: g.leaf(fill("w_z")),
            u_z: g.leaf(fill("u_z")),
            b_z: g.leaf(fill("b_z")),
            w_r: g.leaf(fill("w_r")),
            u_r: g.leaf(fill("u_r")),
            b_r: g.leaf(fill("b_r")),
            w_h: g.leaf(fill("w_h")),
            u_h: g.leaf(fill("u_h")),
            b_h: g.leaf(fill("b_h")),
        }
    }

    fn zero(d: usize) -> impl Fn(&str) -> Tensor<f64> {
        move |name| {
            if name.starts_with('b') {
                Tensor::zeros(&[d])
            } else {
                Tensor::zeros(&[d, d])
            }
        }
    }

    #[test]
    fn zero_parameters_halve_the_state() {
        let mut g = Graph::new();
        let p = bind_constants(&mut g, zero(3));
        let s = g.leaf(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let x = g.leaf(Tensor::vector(vec![9.0, 9.0, 9.0]));
        let out = gru_cell(&mut g, s, x, &p).unwrap();
        assert_eq!(g.value(out), &[0.5, -1.0, 0.25]);
    }

    #[test]
    fn saturated_update_gate_keeps_the_state() {
        let mut g = Graph::new();
        let base = zero(2);
        let p = bind_constants(&mut g, |n| if n == "b_z" { Tensor::full(&[2], -1e6) } else { base(n) });
        let s = g.leaf(Tensor::vector(vec![0.3, -0.7]));
        let x = g.leaf(Tensor::vector(vec![1.0, 1.0]));
        let out = gru_cell(&mut g, s, x, &p).unwrap();
        for (o, s) in g.value(out).iter().zip([0.3, -0.7]) {
            assert!((o - s).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_mismatched_input_width() {
        let mut g = Graph::new();
        let p = bind_constants(&mut g, zero(2));
        let s = g.leaf(Tensor::vector(vec![0.0, 0.0]));
        let x = g.leaf(Tensor::vector(vec![0.0, 0.0, 0.0]));
        assert!(gru_cell(&mut g, s, x, &p).is_err());
    }
}
