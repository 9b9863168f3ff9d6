//! Multi-step attention classifier over passage and question-option
//! memories, and the two-layer feed-forward baseline.

use mmm_autodiff::{gru_cell, Graph, GruParams, GruVars, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::packing::Role;
use crate::encoder::pooled;
use crate::error::{MmmError, Result};

/// Which option scorer sits on top of the encoder. `Man { steps: 0 }` is the
/// feed-forward head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassifierKind {
    Man { steps: usize },
    Fcnn,
}

impl ClassifierKind {
    pub fn from_steps(steps: usize) -> Self {
        ClassifierKind::Man { steps }
    }

    /// Reasoning steps; 0 for the feed-forward head.
    pub fn steps(self) -> usize {
        match self {
            ClassifierKind::Man { steps } => steps,
            ClassifierKind::Fcnn => 0,
        }
    }
}

/// Two-layer feed-forward head with `classes` outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FcnnParams {
    pub hidden_w: ParamId,
    pub hidden_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub classes: usize,
}

impl FcnnParams {
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        classes: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden_w: store.add(format!("{prefix}.hidden_w"), Tensor::randn(&[dim, dim], std, rng)),
            hidden_b: store.add(format!("{prefix}.hidden_b"), Tensor::zeros(&[dim])),
            out_w: store.add(format!("{prefix}.out_w"), Tensor::randn(&[classes, dim], std, rng)),
            out_b: store.add(format!("{prefix}.out_b"), Tensor::zeros(&[classes])),
            classes,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.hidden_w, self.hidden_b, self.out_w, self.out_b]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManParams {
    /// `[d]`, scores passage tokens for the initial state.
    pub w1: ParamId,
    /// `[2d]`, scores `[s; h]` for question-option tokens.
    pub w2: ParamId,
    /// `[4d]`, maps `[s; x; |s - x|; s * x]` to the logit.
    pub w3: ParamId,
    pub gru: GruParams,
    pub steps: usize,
    pub dim: usize,
}

impl ManParams {
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        steps: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w1 = store.add(format!("{prefix}.w1"), Tensor::randn(&[dim], std, rng));
        let w2 = store.add(format!("{prefix}.w2"), Tensor::randn(&[2 * dim], std, rng));
        let w3 = store.add(format!("{prefix}.w3"), Tensor::randn(&[4 * dim], std, rng));
        let gru = GruParams::init(store, &format!("{prefix}.gru"), dim, std, rng);
        Self {
            w1,
            w2,
            w3,
            gru,
            steps,
            dim,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w1, self.w2, self.w3];
        ids.extend(self.gru.ids());
        ids
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Result<ManVars> {
        let w2 = g.param(store, self.w2);
        // The state half of w2 adds the same constant to every question-option
        // score and cancels in the softmax, so only the memory half is used.
        let w2_mem = g.slice(w2, self.dim, 2 * self.dim)?;
        Ok(ManVars {
            w1: g.param(store, self.w1),
            w2_mem,
            w3: g.param(store, self.w3),
            gru: self.gru.bind(g, store),
            steps: self.steps,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ManVars {
    pub w1: Var,
    pub w2_mem: Var,
    pub w3: Var,
    pub gru: GruVars,
    pub steps: usize,
}

/// Option scorer used for multi-choice examples.
#[derive(Clone, Debug, PartialEq)]
pub enum ChoiceHead {
    Man(ManParams),
    Fcnn(FcnnParams),
}

impl ChoiceHead {
    /// `Man { steps: 0 }` and `Fcnn` build the same feed-forward head.
    pub fn init<T: Real, R: Rng + ?Sized>(
        kind: ClassifierKind,
        store: &mut ParamStore<T>,
        dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        match kind.steps() {
            0 => ChoiceHead::Fcnn(FcnnParams::init(store, "choice.fcnn", dim, 1, std, rng)),
            k => ChoiceHead::Man(ManParams::init(store, "choice.man", dim, k, std, rng)),
        }
    }

    pub fn kind(&self) -> ClassifierKind {
        match self {
            ChoiceHead::Man(p) => ClassifierKind::Man { steps: p.steps },
            ChoiceHead::Fcnn(_) => ClassifierKind::Fcnn,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            ChoiceHead::Man(p) => p.ids(),
            ChoiceHead::Fcnn(p) => p.ids(),
        }
    }

    /// Scalar logit (`[1]`) for one packed sequence encoded as `[l, d]` rows.
    pub fn logit<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        rows: Var,
        roles: &[Role],
    ) -> Result<(Var, Option<TraceVars>)> {
        match self {
            ChoiceHead::Fcnn(p) => {
                let pooled = pooled(g, rows)?;
                Ok((fcnn_logit(g, store, p, pooled)?, None))
            }
            ChoiceHead::Man(p) => {
                let vars = p.bind(g, store)?;
                let mem = build_memories(g, rows, roles)?;
                let (logit, trace) = man_forward(g, &mem, &vars)?;
                Ok((logit, Some(trace)))
            }
        }
    }
}

/// Passage (`[p, d]`) and question-option (`[q, d]`) token states, rows in
/// sequence order.
#[derive(Clone, Copy, Debug)]
pub struct Memories {
    pub passage: Var,
    pub qo: Var,
}

pub fn build_memories<T: Real>(g: &mut Graph<T>, rows: Var, roles: &[Role]) -> Result<Memories> {
    let l = g.shape(rows)[0];
    if roles.len() != l {
        return Err(MmmError::Usage(format!("{} roles for {l} positions", roles.len())));
    }
    let pick = |want: Role| -> Vec<usize> { (0..l).filter(|&i| roles[i] == want).collect() };
    let (p, q) = (pick(Role::Passage), pick(Role::Qo));
    if p.is_empty() || q.is_empty() {
        return Err(MmmError::Degenerate(format!(
            "memories need passage and question-option tokens (got {} and {})",
            p.len(),
            q.len()
        )));
    }
    Ok(Memories {
        passage: g.select_rows(rows, &p)?,
        qo: g.select_rows(rows, &q)?,
    })
}

/// Self-attentive summary of the passage: returns `(s0, alpha)`.
pub fn init_state<T: Real>(g: &mut Graph<T>, passage: Var, w1: Var) -> Result<(Var, Var)> {
    let scores = g.matmul(passage, w1)?;
    let alpha = g.softmax(scores)?;
    let s0 = g.matmul(alpha, passage)?;
    Ok((s0, alpha))
}

/// Attention read of the question-option memory with query `s`:
/// returns `(x, beta)`.
pub fn attend_qo<T: Real>(g: &mut Graph<T>, qo: Var, w2_mem: Var) -> Result<(Var, Var)> {
    let scores = g.matmul(qo, w2_mem)?;
    let beta = g.softmax(scores)?;
    let x = g.matmul(beta, qo)?;
    Ok((x, beta))
}

/// One refinement: read `x_k` with query `s_prev`, then `s_k = GRU(s_prev, x_k)`.
/// Returns `(s_k, x_k, beta_k)`.
pub fn reasoning_step<T: Real>(g: &mut Graph<T>, s_prev: Var, qo: Var, vars: &ManVars) -> Result<(Var, Var, Var)> {
    let (x, beta) = attend_qo(g, qo, vars.w2_mem)?;
    let s = gru_cell(g, s_prev, x, &vars.gru)?;
    Ok((s, x, beta))
}

/// `w3ᵀ [s; x; |s - x|; s * x]` as a `[1]` node.
pub fn final_logit<T: Real>(g: &mut Graph<T>, s: Var, x: Var, w3: Var) -> Result<Var> {
    let diff = g.sub(s, x)?;
    let diff = g.abs(diff);
    let prod = g.mul(s, x)?;
    let feat = g.concat(&[s, x, diff, prod])?;
    Ok(g.matmul(w3, feat)?)
}

/// `out_b + out_w · tanh(hidden_w · pooled + hidden_b)`, shape `[classes]`.
pub fn fcnn_logit<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, p: &FcnnParams, pooled: Var) -> Result<Var> {
    let (hw, hb, ow, ob) = (
        g.param(store, p.hidden_w),
        g.param(store, p.hidden_b),
        g.param(store, p.out_w),
        g.param(store, p.out_b),
    );
    let h = g.matmul(hw, pooled)?;
    let h = g.add(h, hb)?;
    let h = g.tanh(h);
    let o = g.matmul(ow, h)?;
    Ok(g.add(o, ob)?)
}

#[derive(Clone, Debug)]
pub struct TraceVars {
    pub alpha: Var,
    /// `(beta, x, s)` per recorded step.
    pub steps: Vec<(Var, Var, Var)>,
}

impl TraceVars {
    pub fn read<T: Real>(&self, g: &Graph<T>) -> ReasoningTrace<T> {
        ReasoningTrace {
            alpha: g.value(self.alpha).to_vec(),
            steps: self
                .steps
                .iter()
                .map(|&(b, x, s)| ReasoningStep {
                    beta: g.value(b).to_vec(),
                    x: g.value(x).to_vec(),
                    s: g.value(s).to_vec(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReasoningStep<T> {
    pub beta: Vec<T>,
    pub x: Vec<T>,
    pub s: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReasoningTrace<T> {
    pub alpha: Vec<T>,
    pub steps: Vec<ReasoningStep<T>>,
}

/// Full multi-step pass for `steps >= 1`.
///
/// With one step, `x0` is a single read with query `s0` and no state update;
/// with `K >= 2`, steps `1..K` update the state and the logit uses the last
/// `(s, x)`. The trace records one entry per read.
pub fn man_forward<T: Real>(g: &mut Graph<T>, mem: &Memories, vars: &ManVars) -> Result<(Var, TraceVars)> {
    if vars.steps == 0 {
        return Err(MmmError::Usage("man_forward needs at least one reasoning step".into()));
    }
    let (s0, alpha) = init_state(g, mem.passage, vars.w1)?;
    let mut trace = TraceVars {
        alpha,
        steps: Vec::new(),
    };
    let (s, x) = if vars.steps == 1 {
        let (x0, beta) = attend_qo(g, mem.qo, vars.w2_mem)?;
        trace.steps.push((beta, x0, s0));
        (s0, x0)
    } else {
        let mut s = s0;
        let mut x = s0;
        for _ in 1..vars.steps {
            let (sk, xk, beta) = reasoning_step(g, s, mem.qo, vars)?;
            trace.steps.push((beta, xk, sk));
            s = sk;
            x = xk;
        }
        (s, x)
    };
    Ok((final_logit(g, s, x, vars.w3)?, trace))
}
