//! Small post-norm transformer encoder trained from scratch.

use mmm_autodiff::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::packing::EncodedSequence;
use crate::error::{usage, Result};

const LN_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Feed-forward width; `None` means four times `hidden`.
    #[serde(default)]
    pub intermediate: Option<usize>,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_hidden() -> usize {
    64
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    4
}
fn default_max_len() -> usize {
    512
}
fn default_dropout() -> f64 {
    0.1
}
fn default_init_std() -> f64 {
    0.02
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden: default_hidden(),
            layers: default_layers(),
            heads: default_heads(),
            max_len: default_max_len(),
            dropout: default_dropout(),
            intermediate: None,
            init_std: default_init_std(),
            seed: 0,
        }
    }

    pub fn ffn_width(&self) -> usize {
        self.intermediate.unwrap_or(4 * self.hidden)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.hidden == 0 || self.heads == 0 || self.max_len == 0 {
            return usage(format!("encoder dims must be positive: {self:?}"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return usage(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return usage(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.ffn_width() == 0 {
            return usage("feed-forward width must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerParams {
    wq: ParamId,
    bq: ParamId,
    // keys carry no bias: it would shift every score in a row equally
    wk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Parameter handles of the encoder inside a shared [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerParams>,
}

/// Encoder output `H` with one column per input position.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates<T> {
    /// `[d, l]`
    pub matrix: Tensor<T>,
}

impl<T: Real> HiddenStates<T> {
    pub fn len(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// State of the leading special token.
    pub fn pooled(&self) -> Vec<T> {
        self.matrix.column(0)
    }
}

impl Encoder {
    /// Registers parameters under `encoder.*`; weights `N(0, init_std^2)`,
    /// biases zero, layer-norm gains one.
    pub fn init<T: Real, R: Rng + ?Sized>(
        config: EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (d, f, std) = (config.hidden, config.ffn_width(), config.init_std);
        let tok_emb = store.add("encoder.tok_emb", Tensor::randn(&[config.vocab_size, d], std, rng));
        let pos_emb = store.add("encoder.pos_emb", Tensor::randn(&[config.max_len, d], std, rng));
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let mut w = |name: &str, shape: &[usize], store: &mut ParamStore<T>| {
                store.add(format!("encoder.layer{i}.{name}"), Tensor::randn(shape, std, rng))
            };
            let wq = w("wq", &[d, d], store);
            let wk = w("wk", &[d, d], store);
            let wv = w("wv", &[d, d], store);
            let wo = w("wo", &[d, d], store);
            let w1 = w("w1", &[d, f], store);
            let w2 = w("w2", &[f, d], store);
            let mut c = |name: &str, n: usize, v: f64| {
                store.add(format!("encoder.layer{i}.{name}"), Tensor::full(&[n], T::of(v)))
            };
            layers.push(LayerParams {
                wq,
                bq: c("bq", d, 0.0),
                wk,
                wv,
                bv: c("bv", d, 0.0),
                wo,
                bo: c("bo", d, 0.0),
                ln1_g: c("ln1_g", d, 1.0),
                ln1_b: c("ln1_b", d, 0.0),
                w1,
                b1: c("b1", f, 0.0),
                w2,
                b2: c("b2", d, 0.0),
                ln2_g: c("ln2_g", d, 1.0),
                ln2_b: c("ln2_b", d, 0.0),
            });
        }
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            ids.extend([
                l.wq, l.bq, l.wk, l.wv, l.bv, l.wo, l.bo, l.ln1_g, l.ln1_b, l.w1, l.b1, l.w2, l.b2, l.ln2_g, l.ln2_b,
            ]);
        }
        ids
    }

    fn check_input(&self, seq: &EncodedSequence) -> Result<()> {
        let l = seq.len();
        if l == 0 {
            return usage("cannot encode an empty sequence");
        }
        if l > self.config.max_len {
            return usage(format!("sequence length {l} exceeds max_len {}", self.config.max_len));
        }
        if let Some(&bad) = seq.token_ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return usage(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            ));
        }
        Ok(())
    }

    /// Builds the forward pass and returns `Hᵀ` as an `[l, d]` node (one row
    /// per position). Dropout is active only when `train` is set.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        seq: &EncodedSequence,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        self.check_input(seq)?;
        let rate = self.config.dropout;
        let ids: Vec<usize> = seq.token_ids.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..seq.len()).collect();
        let keep: Vec<bool> = seq.attention_mask.iter().map(|&m| m != 0).collect();

        let tok = g.param(store, self.tok_emb);
        let pos = g.param(store, self.pos_emb);
        let tok = g.select_rows(tok, &ids)?;
        let pos = g.select_rows(pos, &positions)?;
        let mut x = g.add(tok, pos)?;
        x = g.dropout(x, rate, train, rng)?;
        for layer in &self.layers {
            x = self.block(g, store, layer, x, &keep, train, rng)?;
        }
        Ok(x)
    }

    #[allow(clippy::too_many_arguments)]
    fn block<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        p: &LayerParams,
        x: Var,
        keep: &[bool],
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let d = self.config.hidden;
        let heads = self.config.heads;
        let dh = d / heads;
        let rate = self.config.dropout;
        let mut param = |id| g.param(store, id);
        let (wq, bq, wk, wv, bv, wo, bo) = (
            param(p.wq),
            param(p.bq),
            param(p.wk),
            param(p.wv),
            param(p.bv),
            param(p.wo),
            param(p.bo),
        );

        let q = g.matmul(x, wq)?;
        let q = g.add_row_bias(q, bq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let v = g.add_row_bias(v, bv)?;
        let mask = (!keep.iter().all(|&k| k)).then_some(keep);
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut contexts = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols: Vec<usize> = (h * dh..(h + 1) * dh).collect();
            let qh = g.select_cols(q, &cols)?;
            let kh = g.select_cols(k, &cols)?;
            let vh = g.select_cols(v, &cols)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let probs = g.softmax_rows(scores, mask)?;
            contexts.push(g.matmul(probs, vh)?);
        }
        let ctx = if heads == 1 {
            contexts[0]
        } else {
            g.concat_cols(&contexts)?
        };
        let attn = g.matmul(ctx, wo)?;
        let attn = g.add_row_bias(attn, bo)?;
        let attn = g.dropout(attn, rate, train, rng)?;
        let res = g.add(x, attn)?;
        let (ln1_g, ln1_b) = (g.param(store, p.ln1_g), g.param(store, p.ln1_b));
        let x = g.layer_norm_rows(res, ln1_g, ln1_b, LN_EPS)?;

        let (w1, b1, w2, b2) = (
            g.param(store, p.w1),
            g.param(store, p.b1),
            g.param(store, p.w2),
            g.param(store, p.b2),
        );
        let h = g.matmul(x, w1)?;
        let h = g.add_row_bias(h, b1)?;
        let h = g.gelu(h);
        let h = g.matmul(h, w2)?;
        let h = g.add_row_bias(h, b2)?;
        let h = g.dropout(h, rate, train, rng)?;
        let res = g.add(x, h)?;
        let (ln2_g, ln2_b) = (g.param(store, p.ln2_g), g.param(store, p.ln2_b));
        Ok(g.layer_norm_rows(res, ln2_g, ln2_b, LN_EPS)?)
    }

    /// Eval-mode encoding into a detached `[d, l]` matrix.
    pub fn encode<T: Real>(&self, store: &ParamStore<T>, seq: &EncodedSequence) -> Result<HiddenStates<T>> {
        let mut g = Graph::new();
        // never drawn from with dropout off
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rows = self.forward(&mut g, store, seq, false, &mut rng)?;
        let cols = g.transpose(rows)?;
        Ok(HiddenStates { matrix: g.tensor(cols) })
    }
}

/// Row 0 of an `[l, d]` encoder output as a `[d]` vector.
pub fn pooled<T: Real>(g: &mut Graph<T>, rows: Var) -> Result<Var> {
    let d = g.shape(rows)[1];
    let first = g.select_rows(rows, &[0])?;
    Ok(g.reshape(first, &[d])?)
}
