//! Parameterised building blocks on top of [`Graph`].

use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[d_in, d_out], d_in, rng);
        let b = store.add_uniform(format!("{name}.b"), &[d_out], d_in, rng);
        Linear { w, b, d_in, d_out }
    }

    /// Applies to the last axis of `x`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_tiled(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add_filled(format!("{name}.gain"), &[dim], 1.0),
            bias: store.add_filled(format!("{name}.bias"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x)?;
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_tiled(n, gain)?;
        g.add_tiled(y, bias)
    }
}

/// Scaled dot-product attention with head splitting.
///
/// `q` is `[b, tq, d]`, `k` and `v` are `[b, tk, d]`. Each head sees a
/// `d / n_heads` slice; the softmax runs over the key axis and the heads are
/// concatenated back to `[b, tq, d]`. Also returns the `[b, h, tq, tk]`
/// attention weights.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, n_heads: usize) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(Error::Shape(format!("attention: q {sq:?}, k {sk:?}, v {sv:?}")));
    }
    let (b, tq, d) = (sq[0], sq[1], sq[2]);
    let tk = sk[1];
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Shape(format!("model dim {d} not divisible by {n_heads} heads")));
    }
    let dh = d / n_heads;
    let split = |g: &mut Graph, x: Var, t: usize| -> Result<Var> {
        let r = g.reshape(x, &[b, t, n_heads, dh])?;
        if n_heads == 1 {
            g.reshape(r, &[b, 1, t, dh])
        } else {
            g.permute(r, &[0, 2, 1, 3])
        }
    };
    let qh = split(g, q, tq)?;
    let kh = split(g, k, tk)?;
    let vh = split(g, v, tk)?;
    let scores = g.batch_matmul(qh, kh, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = g.softmax(scores)?;
    let out = g.batch_matmul(weights, vh, false)?;
    let merged = if n_heads == 1 {
        out
    } else {
        g.permute(out, &[0, 2, 1, 3])?
    };
    let out = g.reshape(merged, &[b, tq, d])?;
    Ok((out, weights))
}

/// Multi-head attention with separate query and key/value input widths.
///
/// The key projection has no bias: a per-query constant added to every
/// score cancels in the softmax, so such a bias never receives gradient.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: ParamId,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        q_in: usize,
        kv_in: usize,
        d_attn: usize,
        d_out: usize,
        n_heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_heads == 0 || !d_attn.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "{name}: attention width {d_attn} not divisible by {n_heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(store, &format!("{name}.q"), q_in, d_attn, rng),
            wk: store.add_uniform(format!("{name}.k.w"), &[kv_in, d_attn], kv_in, rng),
            wv: Linear::new(store, &format!("{name}.v"), kv_in, d_attn, rng),
            wo: Linear::new(store, &format!("{name}.o"), d_attn, d_out, rng),
            n_heads,
        })
    }

    pub fn keys(&self, g: &mut Graph, store: &ParamStore, kv_tokens: Var) -> Result<Var> {
        let w = g.param(store, self.wk);
        g.matmul(kv_tokens, w)
    }

    /// Attend from already projected queries/keys/values, then apply the
    /// output projection.
    pub fn attend_projected(&self, g: &mut Graph, store: &ParamStore, q: Var, k: Var, v: Var) -> Result<Var> {
        let (a, _) = attention(g, q, k, v, self.n_heads)?;
        self.wo.forward(g, store, a)
    }

    /// `q_tokens` `[b, tq, q_in]`, `kv_tokens` `[b, tk, kv_in]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q_tokens: Var, kv_tokens: Var) -> Result<Var> {
        let q = self.wq.forward(g, store, q_tokens)?;
        let k = self.keys(g, store, kv_tokens)?;
        let v = self.wv.forward(g, store, kv_tokens)?;
        self.attend_projected(g, store, q, k, v)
    }
}

/// Pre-norm transformer encoder block:
/// `x + SelfAttn(LN(x))`, then `x + FFN(LN(x))` with a GELU feed-forward.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_heads: usize,
        ff_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_model),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, d_model, d_model, d_model, n_heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model),
            ff1: Linear::new(store, &format!("{name}.ff1"), d_model, ff_dim, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ff_dim, d_model, rng),
        })
    }

    /// `x` is `[b, t, d_model]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let f = self.ff1.forward(g, store, h)?;
        let f = g.gelu(f);
        let f = self.ff2.forward(g, store, f)?;
        g.add(x, f)
    }
}

/// Zero every parameter whose name starts with one of `prefixes`.
pub fn zero_params(store: &mut ParamStore, prefixes: &[&str]) {
    let ids: Vec<ParamId> = store
        .ids()
        .filter(|id| prefixes.iter().any(|p| store.name(*id).starts_with(p)))
        .collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
}
