//! Percentile-guided contextual threshold network.
//!
//! The 75 context features pass through a two-layer MLP. The 48 hourly
//! values become tokens of a small transformer encoder whose outputs are
//! summarised by an attention pool. Two cross-attention passes exchange
//! information between the views (context queries the hourly tokens, the
//! pooled hourly vector queries the context) and a fusion MLP feeds the heads:
//!
//! * a distribution head `(mu, sigma)` per target, a learned conservatism
//!   `alpha` per target and `theta = mu + alpha * sigma`
//! * `t1` as the expectation of a seven-class distribution over `2..=8`
//! * `t2 = theta_2 * S(start_hour)`
//! * `t3`, `t4` as `p * softplus(theta) + 1` with a Bernoulli gate `p`
//!
//! The heads predict in label units. Per-target location and scale constants
//! fitted on the training labels map the raw head outputs into those units.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{Sample, HOURLY_END, HOURLY_START, N_CONTEXT, N_FEATURES, N_HOURLY};
use crate::kv::{join, KeyValues};
use crate::labels::{sensitivity_factor, ThresholdLabels, FLUCT_FLOOR, T1_MAX, T1_MIN};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::layers::{attention, EncoderLayer, LayerNorm, Linear, MultiHeadAttention};
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::train::{self, TrainConfig, TrainReport, Trainable};

pub const KIND: &str = "pctn";
pub const CLASS_VALUES: [f64; 7] = [2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
pub const TAU_INACTIVE: f64 = 0.75;
pub const TAU_FLUCT: f64 = 0.90;
pub const SIGMA_FLOOR: f64 = 0.1;
pub const ALPHA_FLOOR: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct PctnConfig {
    pub ctx_hidden: usize,
    pub ctx_out: usize,
    pub token_dim: usize,
    pub encoder_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub fusion_dim: usize,
    pub alpha_hidden: usize,
    /// Bernoulli gates on the fluctuation targets; off gives the ablation.
    pub use_gate: bool,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for PctnConfig {
    fn default() -> Self {
        PctnConfig {
            ctx_hidden: 128,
            ctx_out: 64,
            token_dim: 32,
            encoder_layers: 2,
            n_heads: 4,
            ff_dim: 64,
            fusion_dim: 64,
            alpha_hidden: 32,
            use_gate: true,
            seed: 42,
            train: TrainConfig::default(),
        }
    }
}

impl PctnConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.ctx_hidden,
            self.ctx_out,
            self.token_dim,
            self.n_heads,
            self.ff_dim,
            self.fusion_dim,
            self.alpha_hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("pctn dimensions must be positive".into()));
        }
        for (name, d) in [("token_dim", self.token_dim), ("ctx_out", self.ctx_out)] {
            if d % self.n_heads != 0 {
                return Err(Error::Config(format!("{name} {d} not divisible by {} heads", self.n_heads)));
            }
        }
        self.train.validate()
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("ctx_in", N_CONTEXT);
        kv.set("hourly_tokens", N_HOURLY);
        kv.set("ctx_hidden", self.ctx_hidden);
        kv.set("ctx_out", self.ctx_out);
        kv.set("token_dim", self.token_dim);
        kv.set("encoder_layers", self.encoder_layers);
        kv.set("n_heads", self.n_heads);
        kv.set("ff_dim", self.ff_dim);
        kv.set("fusion_dim", self.fusion_dim);
        kv.set("alpha_hidden", self.alpha_hidden);
        kv.set("use_gate", self.use_gate);
        kv.set("seed", self.seed);
        self.train.write_kv(kv, "train.");
    }

    pub fn read_kv(&mut self, kv: &KeyValues) -> Result<()> {
        for (key, expected) in [("ctx_in", N_CONTEXT), ("hourly_tokens", N_HOURLY)] {
            if let Some(v) = kv.get::<usize>(key)? {
                if v != expected {
                    return Err(Error::Config(format!("{key} is fixed at {expected}, got {v}")));
                }
            }
        }
        kv.read_into("ctx_hidden", &mut self.ctx_hidden)?;
        kv.read_into("ctx_out", &mut self.ctx_out)?;
        kv.read_into("token_dim", &mut self.token_dim)?;
        kv.read_into("encoder_layers", &mut self.encoder_layers)?;
        kv.read_into("n_heads", &mut self.n_heads)?;
        kv.read_into("ff_dim", &mut self.ff_dim)?;
        kv.read_into("fusion_dim", &mut self.fusion_dim)?;
        kv.read_into("alpha_hidden", &mut self.alpha_hidden)?;
        kv.read_into("use_gate", &mut self.use_gate)?;
        kv.read_into("seed", &mut self.seed)?;
        self.train.read_kv(kv, "train.")
    }
}

/// Per-target location and scale of the head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetScale {
    pub loc: [f64; 4],
    pub scale: [f64; 4],
}

impl Default for TargetScale {
    fn default() -> Self {
        TargetScale {
            loc: [0.0; 4],
            scale: [1.0; 4],
        }
    }
}

fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 1.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
    (m, if s > 1e-6 { s } else { 1.0 })
}

impl TargetScale {
    /// Fitted in theta space: `t1`, `t2 / S(h)`, and the inverse softplus of
    /// the above-floor excess of `t3`, `t4`.
    pub fn fit(samples: &[&Sample]) -> Result<Self> {
        let mut cols: [Vec<f64>; 4] = Default::default();
        for s in samples {
            let l = s.labels()?;
            cols[0].push(f64::from(l.t1));
            cols[1].push(l.t2 / sensitivity_factor(usize::from(s.start_hour))?);
            for (k, t) in [(2, l.t3), (3, l.t4)] {
                if t > FLUCT_FLOOR {
                    cols[k].push(inv_softplus(t - FLUCT_FLOOR));
                }
            }
        }
        let mut out = TargetScale::default();
        for (k, c) in cols.iter().enumerate() {
            let (m, s) = mean_std(c);
            out.loc[k] = m;
            out.scale[k] = s;
        }
        Ok(out)
    }

    fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("target_loc", join(&self.loc));
        kv.set("target_scale", join(&self.scale));
    }

    fn read_kv(kv: &KeyValues) -> Result<Self> {
        let get = |key: &str| -> Result<[f64; 4]> {
            let v: Vec<f64> = kv.get_list(key)?.ok_or_else(|| Error::Config(format!("missing {key}")))?;
            v.try_into().map_err(|_| Error::Config(format!("{key} needs 4 values")))
        };
        Ok(TargetScale {
            loc: get("target_loc")?,
            scale: get("target_scale")?,
        })
    }
}

/// Model inputs for a batch, with the hourly rows deduplicated: the 24
/// start-hour samples of a cell-day share one hourly vector, so the encoder
/// runs once per distinct row.
///
/// For the context-to-hourly attention the queries are laid out as
/// `[rows, width]`: `query_index` lists, per distinct row, the samples using
/// it (padded by repeating the last one), and `slot_of` maps each sample back
/// to its position in that layout.
#[derive(Clone, Debug)]
pub struct PctnBatch {
    pub ctx: Tensor,
    pub hourly: Tensor,
    pub row_of: Vec<usize>,
    pub sensitivity: Vec<f64>,
    pub width: usize,
    pub query_index: Vec<usize>,
    pub slot_of: Vec<usize>,
}

impl PctnBatch {
    pub fn new(samples: &[&Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Shape("empty pctn batch".into()));
        }
        let mut ctx = Vec::with_capacity(samples.len() * N_CONTEXT);
        let mut hourly = Vec::new();
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut row_of = Vec::with_capacity(samples.len());
        let mut sensitivity = Vec::with_capacity(samples.len());
        for s in samples {
            if s.x.len() != N_FEATURES {
                return Err(Error::Shape(format!("pctn input has {} features, expected {N_FEATURES}", s.x.len())));
            }
            ctx.extend_from_slice(&s.x[..HOURLY_START]);
            ctx.extend_from_slice(&s.x[HOURLY_END..]);
            let h = &s.x[HOURLY_START..HOURLY_END];
            let key: Vec<u64> = h.iter().map(|v| v.to_bits()).collect();
            let next = seen.len();
            let row = *seen.entry(key).or_insert_with(|| {
                hourly.extend_from_slice(h);
                next
            });
            row_of.push(row);
            sensitivity.push(sensitivity_factor(usize::from(s.start_hour))?);
        }
        let u = seen.len();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); u];
        for (i, &r) in row_of.iter().enumerate() {
            members[r].push(i);
        }
        let width = members.iter().map(Vec::len).max().unwrap_or(1);
        let mut query_index = Vec::with_capacity(u * width);
        let mut slot_of = vec![0; samples.len()];
        for (r, m) in members.iter().enumerate() {
            for j in 0..width {
                let i = m[j.min(m.len() - 1)];
                if j < m.len() {
                    slot_of[i] = r * width + j;
                }
                query_index.push(i);
            }
        }
        Ok(PctnBatch {
            ctx: Tensor::new(vec![samples.len(), N_CONTEXT], ctx)?,
            hourly: Tensor::new(vec![u, N_HOURLY], hourly)?,
            row_of,
            sensitivity,
            width,
            query_index,
            slot_of,
        })
    }

    pub fn len(&self) -> usize {
        self.row_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_of.is_empty()
    }
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PctnVars {
    pub v_ctx: Var,
    pub h_pat: Var,
    pub v_pat: Var,
    pub pool_weights: Var,
    pub v_attended: Var,
    pub v_ctx_updated: Var,
    pub v_fused: Var,
    pub mu: Var,
    pub sigma: Var,
    pub alpha: Var,
    pub theta: Var,
    pub hour_logits: Var,
    pub p_hours: Var,
    pub gates: Option<Var>,
    pub t_hat: [Var; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct PctnOutput {
    pub mu: [f64; 4],
    pub sigma: [f64; 4],
    pub alpha: [f64; 4],
    pub theta: [f64; 4],
    pub p_hours: [f64; 7],
    pub gate_total: Option<f64>,
    pub gate_hourly: Option<f64>,
    pub t_hat: [f64; 4],
}

#[derive(Clone, Debug)]
struct AlphaMlp {
    l1: Linear,
    l2: Linear,
}

#[derive(Clone, Debug)]
pub struct PctnModel {
    pub config: PctnConfig,
    pub scale: TargetScale,
    pub store: ParamStore,
    ctx1: Linear,
    ctx_ln1: LayerNorm,
    ctx2: Linear,
    ctx_ln2: LayerNorm,
    embed_w: ParamId,
    embed_b: ParamId,
    pos: ParamId,
    encoder: Vec<EncoderLayer>,
    pool_w: ParamId,
    fwd_attn: MultiHeadAttention,
    bwd_attn: MultiHeadAttention,
    fuse1: Linear,
    fuse_ln: LayerNorm,
    fuse2: Linear,
    dist: Linear,
    alpha: Vec<AlphaMlp>,
    hours: Linear,
    gate: Option<Linear>,
}

impl PctnModel {
    /// Randomly initialised model (seeded by `config.seed`).
    pub fn new(config: PctnConfig, scale: TargetScale) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut s = ParamStore::new();
        let ctx1 = Linear::new(&mut s, "ctx.l1", N_CONTEXT, c.ctx_hidden, &mut rng);
        let ctx_ln1 = LayerNorm::new(&mut s, "ctx.ln1", c.ctx_hidden);
        let ctx2 = Linear::new(&mut s, "ctx.l2", c.ctx_hidden, c.ctx_out, &mut rng);
        let ctx_ln2 = LayerNorm::new(&mut s, "ctx.ln2", c.ctx_out);
        let embed_w = s.add_uniform("hourly.embed.w", &[N_HOURLY, c.token_dim], 1, &mut rng);
        let embed_b = s.add_uniform("hourly.embed.b", &[N_HOURLY, c.token_dim], 1, &mut rng);
        let pos = s.add_uniform("hourly.pos", &[N_HOURLY, c.token_dim], c.token_dim, &mut rng);
        let encoder = (0..c.encoder_layers)
            .map(|i| EncoderLayer::new(&mut s, &format!("hourly.enc{i}"), c.token_dim, c.n_heads, c.ff_dim, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let pool_w = s.add_uniform("hourly.pool", &[c.token_dim, 1], c.token_dim, &mut rng);
        let fwd_attn = MultiHeadAttention::new(&mut s, "cross.fwd", c.ctx_out, c.token_dim, c.ctx_out, c.ctx_out, c.n_heads, &mut rng)?;
        let bwd_attn = MultiHeadAttention::new(&mut s, "cross.bwd", c.token_dim, c.ctx_out, c.ctx_out, c.ctx_out, c.n_heads, &mut rng)?;
        let fuse1 = Linear::new(&mut s, "fuse.l1", 2 * c.ctx_out, c.fusion_dim, &mut rng);
        let fuse_ln = LayerNorm::new(&mut s, "fuse.ln", c.fusion_dim);
        let fuse2 = Linear::new(&mut s, "fuse.l2", c.fusion_dim, c.fusion_dim, &mut rng);
        let dist = Linear::new(&mut s, "head.dist", c.fusion_dim, 8, &mut rng);
        let alpha = (1..=4)
            .map(|i| AlphaMlp {
                l1: Linear::new(&mut s, &format!("head.alpha{i}.l1"), c.fusion_dim + 2, c.alpha_hidden, &mut rng),
                l2: Linear::new(&mut s, &format!("head.alpha{i}.l2"), c.alpha_hidden, 1, &mut rng),
            })
            .collect();
        let hours = Linear::new(&mut s, "head.hours", c.fusion_dim, CLASS_VALUES.len(), &mut rng);
        let gate = c.use_gate.then(|| Linear::new(&mut s, "head.gate", c.fusion_dim, 2, &mut rng));
        Ok(PctnModel {
            config,
            scale,
            store: s,
            ctx1,
            ctx_ln1,
            ctx2,
            ctx_ln2,
            embed_w,
            embed_b,
            pos,
            encoder,
            pool_w,
            fwd_attn,
            bwd_attn,
            fuse1,
            fuse_ln,
            fuse2,
            dist,
            alpha,
            hours,
            gate,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Start the output heads at the training label statistics: sigma at
    /// half the target scale, hour-class logits at the log class
    /// frequencies, gates at the above-floor rates.
    pub fn init_output_biases(&mut self, samples: &[&Sample]) -> Result<()> {
        let n = samples.len().max(1) as f64;
        let mut counts = [0.0; 7];
        let mut above = [0.0; 2];
        for s in samples {
            let l = s.labels()?;
            counts[class_index(l.t1)?] += 1.0;
            above[0] += f64::from(u8::from(l.t3 > FLUCT_FLOOR));
            above[1] += f64::from(u8::from(l.t4 > FLUCT_FLOOR));
        }
        let db = self.store.get_mut(self.dist.b).data_mut();
        for k in 0..4 {
            db[k] = 0.0;
            let sc = self.scale.scale[k];
            db[4 + k] = inv_softplus((0.5 * sc - SIGMA_FLOOR).max(0.05)) / sc;
        }
        let hb = self.store.get_mut(self.hours.b).data_mut();
        let logs: Vec<f64> = counts.iter().map(|c| ((c + 1.0) / (n + 7.0)).ln()).collect();
        let mean = logs.iter().sum::<f64>() / 7.0;
        for (b, l) in hb.iter_mut().zip(&logs) {
            *b = l - mean;
        }
        if let Some(gate) = &self.gate {
            let gb = self.store.get_mut(gate.b).data_mut();
            for (b, a) in gb.iter_mut().zip(above) {
                let p = (a / n).clamp(1e-3, 1.0 - 1e-3);
                *b = (p / (1.0 - p)).ln();
            }
        }
        Ok(())
    }

    /// `GELU(LN(W2 GELU(LN(W1 x))))`, `x` is `[n, 75]`.
    pub fn encode_context(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ctx1.forward(g, store, x)?;
        let h = self.ctx_ln1.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = self.ctx2.forward(g, store, h)?;
        let h = self.ctx_ln2.forward(g, store, h)?;
        Ok(g.gelu(h))
    }

    /// `x` is `[u, 48]`. Returns `(H [u, 48, d], v_pat [u, d], pool weights [u, 48])`.
    pub fn encode_hourly(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var, Var)> {
        let u = g.shape(x)[0];
        let d = self.config.token_dim;
        let w = g.param(store, self.embed_w);
        let b = g.param(store, self.embed_b);
        let e = g.feature_embed(x, w, b)?;
        let pos = g.param(store, self.pos);
        let mut h = g.add_tiled(e, pos)?;
        for layer in &self.encoder {
            h = layer.forward(g, store, h)?;
        }
        let pw = g.param(store, self.pool_w);
        let scores = g.matmul(h, pw)?;
        let scores = g.reshape(scores, &[u, N_HOURLY])?;
        let weights = g.softmax(scores)?;
        let w3 = g.reshape(weights, &[u, 1, N_HOURLY])?;
        let v = g.batch_matmul(w3, h, false)?;
        let v = g.reshape(v, &[u, d])?;
        Ok((h, v, weights))
    }

    /// Returns `(v_attended, v_ctx_updated, v_fused)`, all `[n, .]`.
    pub fn cross_attend_fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        v_ctx: Var,
        h_pat: Var,
        v_pat: Var,
        batch: &PctnBatch,
    ) -> Result<(Var, Var, Var)> {
        let n = batch.len();
        let u = batch.hourly.rows();
        let (co, d) = (self.config.ctx_out, self.config.token_dim);
        let fa = &self.fwd_attn;
        let q = fa.wq.forward(g, store, v_ctx)?;
        let q = g.gather_rows(q, &batch.query_index)?;
        let q = g.reshape(q, &[u, batch.width, co])?;
        let k = fa.keys(g, store, h_pat)?;
        let v = fa.wv.forward(g, store, h_pat)?;
        let (att, _) = attention(g, q, k, v, fa.n_heads)?;
        let att = g.reshape(att, &[u * batch.width, co])?;
        let att = g.gather_rows(att, &batch.slot_of)?;
        let att = fa.wo.forward(g, store, att)?;
        let ctx_tok = g.reshape(v_ctx, &[n, 1, co])?;
        let pat = g.gather_rows(v_pat, &batch.row_of)?;
        let pat_tok = g.reshape(pat, &[n, 1, d])?;
        let upd = self.bwd_attn.forward(g, store, pat_tok, ctx_tok)?;
        let upd = g.reshape(upd, &[n, co])?;
        let cat = g.concat(&[att, upd])?;
        let f = self.fuse1.forward(g, store, cat)?;
        let f = self.fuse_ln.forward(g, store, f)?;
        let f = g.gelu(f);
        let f = self.fuse2.forward(g, store, f)?;
        Ok((att, upd, g.gelu(f)))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &PctnBatch) -> Result<PctnVars> {
        let n = batch.len();
        let x_ctx = g.constant(batch.ctx.clone());
        let v_ctx = self.encode_context(g, store, x_ctx)?;
        let x_h = g.constant(batch.hourly.clone());
        let (h_pat, v_pat, pool_weights) = self.encode_hourly(g, store, x_h)?;
        let (v_attended, v_ctx_updated, v) = self.cross_attend_fuse(g, store, v_ctx, h_pat, v_pat, batch)?;

        let z = self.dist.forward(g, store, v)?;
        let zm = g.slice_cols(z, 0, 4)?;
        let zs = g.slice_cols(z, 4, 8)?;
        let loc = g.constant(Tensor::vector(self.scale.loc.to_vec()));
        let sc = g.constant(Tensor::vector(self.scale.scale.to_vec()));
        let inv_sc = g.constant(Tensor::vector(self.scale.scale.iter().map(|s| 1.0 / s).collect()));
        let mu = g.mul_tiled(zm, sc)?;
        let mu = g.add_tiled(mu, loc)?;
        let s_raw = g.mul_tiled(zs, sc)?;
        let s_pos = g.softplus(s_raw);
        let sigma = g.add_scalar(s_pos, SIGMA_FLOOR);
        let sigma_n = g.mul_tiled(sigma, inv_sc)?;
        let mut alphas = Vec::with_capacity(4);
        for (i, mlp) in self.alpha.iter().enumerate() {
            let m_i = g.slice_cols(zm, i, i + 1)?;
            let s_i = g.slice_cols(sigma_n, i, i + 1)?;
            let inp = g.concat(&[v, m_i, s_i])?;
            let h = mlp.l1.forward(g, store, inp)?;
            let h = g.gelu(h);
            let a = mlp.l2.forward(g, store, h)?;
            let a = g.softplus(a);
            alphas.push(g.add_scalar(a, ALPHA_FLOOR));
        }
        let alpha = g.concat(&alphas)?;
        let spread = g.mul(alpha, sigma)?;
        let theta = g.add(mu, spread)?;

        let hour_logits = self.hours.forward(g, store, v)?;
        let p_hours = g.softmax(hour_logits)?;
        let cv = g.constant(Tensor::new(vec![CLASS_VALUES.len(), 1], CLASS_VALUES.to_vec())?);
        let t1 = g.matmul(p_hours, cv)?;

        let th2 = g.slice_cols(theta, 1, 2)?;
        let sens = g.constant(Tensor::new(vec![n, 1], batch.sensitivity.clone())?);
        let t2 = g.mul(th2, sens)?;

        let th34 = g.slice_cols(theta, 2, 4)?;
        let magnitude = g.softplus(th34);
        let (gates, fluct) = match &self.gate {
            Some(gate) => {
                let gl = gate.forward(g, store, v)?;
                let p = g.sigmoid(gl);
                let m = g.mul(p, magnitude)?;
                (Some(p), g.add_scalar(m, FLUCT_FLOOR))
            }
            None => (None, g.add_scalar(magnitude, FLUCT_FLOOR)),
        };
        let t3 = g.slice_cols(fluct, 0, 1)?;
        let t4 = g.slice_cols(fluct, 1, 2)?;
        Ok(PctnVars {
            v_ctx,
            h_pat,
            v_pat,
            pool_weights,
            v_attended,
            v_ctx_updated,
            v_fused: v,
            mu,
            sigma,
            alpha,
            theta,
            hour_logits,
            p_hours,
            gates,
            t_hat: [t1, t2, t3, t4],
        })
    }

    /// Mean of: cross entropy on `t1 - 2`, pinball 0.75 on `t2`, pinball
    /// 0.90 on `t3` and `t4`, and (with gates) the BCE of both gates against
    /// the above-floor indicators.
    pub fn loss(&self, g: &mut Graph, vars: &PctnVars, labels: &[ThresholdLabels]) -> Result<Var> {
        let classes = labels.iter().map(|l| class_index(l.t1)).collect::<Result<Vec<_>>>()?;
        let ce = g.cross_entropy(vars.hour_logits, &classes)?;
        let t2: Vec<f64> = labels.iter().map(|l| l.t2).collect();
        let t3: Vec<f64> = labels.iter().map(|l| l.t3).collect();
        let t4: Vec<f64> = labels.iter().map(|l| l.t4).collect();
        let mut parts = vec![
            ce,
            g.pinball(vars.t_hat[1], &t2, TAU_INACTIVE)?,
            g.pinball(vars.t_hat[2], &t3, TAU_FLUCT)?,
            g.pinball(vars.t_hat[3], &t4, TAU_FLUCT)?,
        ];
        if let Some(gates) = vars.gates {
            let above: Vec<f64> = labels
                .iter()
                .flat_map(|l| [l.t3 > FLUCT_FLOOR, l.t4 > FLUCT_FLOOR])
                .map(|b| f64::from(u8::from(b)))
                .collect();
            parts.push(g.bce(gates, &above)?);
        }
        let mut total = parts[0];
        for &p in &parts[1..] {
            total = g.add(total, p)?;
        }
        Ok(g.scale(total, 1.0 / parts.len() as f64))
    }

    pub fn outputs(&self, g: &Graph, vars: &PctnVars) -> Vec<PctnOutput> {
        let n = g.shape(vars.mu)[0];
        let row4 = |v: Var, i: usize| -> [f64; 4] { g.value(v).row(i).try_into().expect("4 columns") };
        (0..n)
            .map(|i| {
                let gates = vars.gates.map(|v| g.value(v).row(i).to_vec());
                PctnOutput {
                    mu: row4(vars.mu, i),
                    sigma: row4(vars.sigma, i),
                    alpha: row4(vars.alpha, i),
                    theta: row4(vars.theta, i),
                    p_hours: g.value(vars.p_hours).row(i).try_into().expect("7 classes"),
                    gate_total: gates.as_ref().map(|p| p[0]),
                    gate_hourly: gates.as_ref().map(|p| p[1]),
                    t_hat: vars.t_hat.map(|v| g.value(v).data()[i]),
                }
            })
            .collect()
    }

    pub fn predict_batch(&self, samples: &[&Sample]) -> Result<Vec<PctnOutput>> {
        let batch = PctnBatch::new(samples)?;
        let mut g = Graph::new();
        let vars = self.forward(&mut g, &self.store, &batch)?;
        Ok(self.outputs(&g, &vars))
    }

    /// Outputs in input order. Batches are whole cell-days and run in parallel.
    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<PctnOutput>> {
        let groups = train::group_by_cell_day(samples);
        let order: Vec<usize> = (0..groups.len()).collect();
        let batches = train::pack_batches(&groups, &order, self.config.train.batch_size);
        let results = crate::par::map(&batches, |b| {
            let refs: Vec<&Sample> = b.iter().map(|&i| &samples[i]).collect();
            self.predict_batch(&refs)
        });
        let mut out: Vec<Option<PctnOutput>> = vec![None; samples.len()];
        for (b, r) in batches.iter().zip(results) {
            for (&i, o) in b.iter().zip(r?) {
                out[i] = Some(o);
            }
        }
        Ok(out.into_iter().map(|o| o.expect("every sample batched")).collect())
    }

    pub fn config_text(&self) -> String {
        let mut kv = KeyValues::new();
        self.config.write_kv(&mut kv);
        self.scale.write_kv(&mut kv);
        kv.to_text()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: KIND.into(),
            seed: self.config.seed,
            config: self.config_text(),
            params: self.store.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != KIND {
            return Err(Error::Checkpoint(format!("expected a {KIND} checkpoint, found {}", ck.kind)));
        }
        let kv = KeyValues::parse(&ck.config, "checkpoint config")?;
        let mut config = PctnConfig::default();
        config.read_kv(&kv)?;
        let scale = TargetScale::read_kv(&kv)?;
        let mut model = PctnModel::new(config, scale)?;
        load_params(&mut model.store, &ck.params)?;
        Ok(model)
    }
}

/// Copy every parameter of `from` into `into`, requiring identical names
/// and shapes.
pub fn load_params(into: &mut ParamStore, from: &ParamStore) -> Result<()> {
    if into.len() != from.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameter tensors, model expects {}",
            from.len(),
            into.len()
        )));
    }
    for (name, t) in from.iter() {
        into.set(name, t.clone())?;
    }
    Ok(())
}

pub fn class_index(t1: u32) -> Result<usize> {
    if !(T1_MIN..=T1_MAX).contains(&t1) {
        return Err(Error::Label(format!("t1 = {t1} outside {T1_MIN}..={T1_MAX}")));
    }
    Ok((t1 - T1_MIN) as usize)
}

impl Trainable for PctnModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn batch_loss(&self, g: &mut Graph, store: &ParamStore, batch: &[&Sample]) -> Result<Var> {
        let pb = PctnBatch::new(batch)?;
        let vars = self.forward(g, store, &pb)?;
        let labels = batch.iter().map(|s| s.labels()).collect::<Result<Vec<_>>>()?;
        self.loss(g, &vars, &labels)
    }
}

/// Train from scratch. Validation uses the latest training date.
pub fn train(samples: &[Sample], config: &PctnConfig) -> Result<(PctnModel, TrainReport)> {
    config.validate()?;
    train::check_schema(samples, "train pctn")?;
    let groups = train::group_by_cell_day(samples);
    let (tr, val) = train::validation_split(samples, groups, config.train.val_fraction)?;
    let tr = train::cap_groups(tr, config.train.sample_cap);
    let refs: Vec<&Sample> = tr.iter().flatten().map(|&i| &samples[i]).collect();
    let mut model = PctnModel::new(config.clone(), TargetScale::fit(&refs)?)?;
    model.init_output_biases(&refs)?;
    let report = train::fit(&mut model, samples, &tr, &val, &config.train, config.seed, "train pctn")?;
    Ok((model, report))
}

/// Warm-start update on new samples for `epochs` in `5..=10`, at a tenth of
/// the original peak learning rate.
pub fn finetune(model: &PctnModel, samples: &[Sample], epochs: usize) -> Result<(PctnModel, TrainReport)> {
    if !(5..=10).contains(&epochs) {
        return Err(Error::Config(format!("finetune epochs {epochs} outside 5..=10")));
    }
    train::check_schema(samples, "finetune pctn")?;
    let mut m = model.clone();
    let cfg = TrainConfig {
        epochs,
        lr_max: model.config.train.lr_max * 0.1,
        ..model.config.train.clone()
    };
    let groups = train::group_by_cell_day(samples);
    let report = train::fit(&mut m, samples, &groups, &[], &cfg, model.config.seed, "finetune pctn")?;
    Ok((m, report))
}

pub const PREDICTION_HEADER: &str =
    "cell_id,date,start_hour,t1_hat,t2_hat,t3_hat,t4_hat,mu_t2,sigma_t2,alpha_t1,alpha_t2,alpha_t3,alpha_t4,gate_t3,gate_t4";

pub fn predictions_csv(samples: &[Sample], outputs: &[PctnOutput]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from(PREDICTION_HEADER);
    s.push('\n');
    for (x, o) in samples.iter().zip(outputs) {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            x.cell_id,
            x.date.format(crate::ingest::DATE_FORMAT),
            x.start_hour,
            o.t_hat[0],
            o.t_hat[1],
            o.t_hat[2],
            o.t_hat[3],
            o.mu[1],
            o.sigma[1],
            o.alpha[0],
            o.alpha[1],
            o.alpha[2],
            o.alpha[3],
            opt(o.gate_total),
            opt(o.gate_hourly)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::T2_FLOOR;
    use crate::nn::gradcheck::{check_params, DEFAULT_EPS, DEFAULT_TOL};
    use crate::nn::layers::zero_params;
    use chrono::NaiveDate;
    use proptest::prelude::*;
    use rand::Rng;

    pub(crate) fn tiny_config() -> PctnConfig {
        PctnConfig {
            ctx_hidden: 8,
            ctx_out: 8,
            token_dim: 4,
            encoder_layers: 1,
            n_heads: 2,
            ff_dim: 8,
            fusion_dim: 8,
            alpha_hidden: 4,
            ..Default::default()
        }
    }

    fn random_samples(n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let t3 = if rng.random_bool(0.3) { 1.0 + rng.random_range(0.5..3.0) } else { 1.0 };
                Sample {
                    cell_id: format!("C{}", i / 3),
                    date: NaiveDate::from_ymd_opt(2024, 1, 1 + (i % 2) as u32).unwrap(),
                    start_hour: rng.random_range(1..=24),
                    x: (0..N_FEATURES).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    labels: Some(ThresholdLabels {
                        t1: rng.random_range(2..=8),
                        t2: rng.random_range(T2_FLOOR..40.0),
                        t3,
                        t4: if t3 > 1.0 { 1.0 + (t3 - 1.0) * 0.5 } else { 1.0 },
                    }),
                }
            })
            .collect()
    }

    fn model(cfg: PctnConfig) -> PctnModel {
        PctnModel::new(cfg, TargetScale::default()).unwrap()
    }

    #[test]
    fn context_encoder_zero_weights_and_width() {
        let mut m = model(PctnConfig::default());
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[3, N_CONTEXT], 0.7));
        let v = m.encode_context(&mut g, &m.store, x).unwrap();
        assert_eq!(g.shape(v), &[3, 64]);
        zero_params(&mut m.store, &["ctx."]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[2, N_CONTEXT], 0.7));
        let v = m.encode_context(&mut g, &m.store, x).unwrap();
        assert!(g.value(v).data().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn zero_pool_weights_give_token_mean() {
        let mut m = model(PctnConfig::default());
        zero_params(&mut m.store, &["hourly.pool"]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, N_HOURLY], (0..N_HOURLY).map(|i| i as f64 / 10.0).collect()).unwrap());
        let (h, v, w) = m.encode_hourly(&mut g, &m.store, x).unwrap();
        let d = m.config.token_dim;
        let hd = g.value(h).data();
        for j in 0..d {
            let mean = (0..N_HOURLY).map(|t| hd[t * d + j]).sum::<f64>() / N_HOURLY as f64;
            assert!((g.value(v).data()[j] - mean).abs() < 1e-12);
        }
        let s: f64 = g.value(w).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hourly_positions_matter() {
        let m = model(PctnConfig::default());
        let mut a: Vec<f64> = (0..N_HOURLY).map(|i| (i as f64 * 0.37).sin()).collect();
        let run = |x: &[f64]| {
            let mut g = Graph::new();
            let xv = g.constant(Tensor::new(vec![1, N_HOURLY], x.to_vec()).unwrap());
            let (_, v, _) = m.encode_hourly(&mut g, &m.store, xv).unwrap();
            g.value(v).data().to_vec()
        };
        let before = run(&a);
        a.swap(3, 17);
        assert_ne!(before, run(&a));
    }

    #[test]
    fn backward_attention_over_single_token_is_value_projection() {
        let m = model(PctnConfig::default());
        let samples = random_samples(2, 1);
        let refs: Vec<&Sample> = samples.iter().collect();
        let batch = PctnBatch::new(&refs).unwrap();
        let mut g = Graph::new();
        let vars = m.forward(&mut g, &m.store, &batch).unwrap();
        let ba = &m.bwd_attn;
        let v = ba.wv.forward(&mut g, &m.store, vars.v_ctx).unwrap();
        let o = ba.wo.forward(&mut g, &m.store, v).unwrap();
        for (a, b) in g.value(o).data().iter().zip(g.value(vars.v_ctx_updated).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(g.shape(vars.v_fused), &[2, 64]);
    }

    #[test]
    fn head_limits() {
        let mut m = model(PctnConfig::default());
        zero_params(&mut m.store, &["head.hours", "head.gate.w"]);
        let gb = m.gate.as_ref().unwrap().b;
        m.store.get_mut(gb).data_mut().fill(-60.0);
        let db = m.dist.b;
        zero_params(&mut m.store, &["head.dist.w"]);
        m.store.get_mut(db).data_mut()[4..].fill(-100.0);
        let samples = random_samples(5, 2);
        let refs: Vec<&Sample> = samples.iter().collect();
        for o in m.predict_batch(&refs).unwrap() {
            assert!((o.t_hat[0] - 5.0).abs() < 1e-12);
            assert!((o.t_hat[2] - 1.0).abs() < 1e-12 && (o.t_hat[3] - 1.0).abs() < 1e-12);
            assert!(o.sigma.iter().all(|&s| (SIGMA_FLOOR..SIGMA_FLOOR + 1e-12).contains(&s)));
        }
    }

    #[test]
    fn open_gate_adds_magnitude() {
        let mut m = model(PctnConfig::default());
        zero_params(&mut m.store, &["head.gate.w", "head.dist.w", "head.alpha"]);
        let gb = m.gate.as_ref().unwrap().b;
        m.store.get_mut(gb).data_mut().fill(60.0);
        // alpha = softplus(0) + 0.1 and sigma = softplus(b) + 0.1; solve mu
        // so that softplus(theta) = 2.5.
        let alpha = std::f64::consts::LN_2 + ALPHA_FLOOR;
        let sigma = std::f64::consts::LN_2 + SIGMA_FLOOR;
        let db = m.store.get_mut(m.dist.b).data_mut();
        db.fill(0.0);
        db[2] = inv_softplus(2.5) - alpha * sigma;
        let samples = random_samples(3, 3);
        let refs: Vec<&Sample> = samples.iter().collect();
        for o in m.predict_batch(&refs).unwrap() {
            assert!((o.t_hat[2] - 3.5).abs() < 1e-9, "{}", o.t_hat[2]);
        }
    }

    #[test]
    fn shifting_hour_logits_keeps_distribution() {
        let mut m = model(PctnConfig::default());
        let samples = random_samples(4, 4);
        let refs: Vec<&Sample> = samples.iter().collect();
        let before = m.predict_batch(&refs).unwrap();
        m.store.get_mut(m.hours.b).data_mut().iter_mut().for_each(|b| *b += 3.7);
        let after = m.predict_batch(&refs).unwrap();
        for (a, b) in before.iter().zip(&after) {
            for (x, y) in a.p_hours.iter().zip(&b.p_hours) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    fn termwise_loss(outs: &[PctnOutput], labels: &[ThresholdLabels], gated: bool) -> f64 {
        let n = outs.len() as f64;
        let pin = |y: f64, p: f64, tau: f64| if y >= p { tau * (y - p) } else { (1.0 - tau) * (p - y) };
        let bce = |y: f64, p: f64| {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        };
        let mut ce = 0.0;
        let mut p2 = 0.0;
        let mut p3 = 0.0;
        let mut p4 = 0.0;
        let mut b = 0.0;
        for (o, l) in outs.iter().zip(labels) {
            ce -= o.p_hours[(l.t1 - 2) as usize].ln();
            p2 += pin(l.t2, o.t_hat[1], 0.75);
            p3 += pin(l.t3, o.t_hat[2], 0.9);
            p4 += pin(l.t4, o.t_hat[3], 0.9);
            if gated {
                b += bce(f64::from(u8::from(l.t3 > 1.0)), o.gate_total.unwrap());
                b += bce(f64::from(u8::from(l.t4 > 1.0)), o.gate_hourly.unwrap());
            }
        }
        if gated {
            (ce / n + p2 / n + p3 / n + p4 / n + b / (2.0 * n)) / 5.0
        } else {
            (ce / n + p2 / n + p3 / n + p4 / n) / 4.0
        }
    }

    #[test]
    fn loss_matches_termwise_oracle() {
        for gated in [true, false] {
            let m = model(PctnConfig {
                use_gate: gated,
                ..Default::default()
            });
            let samples = random_samples(2, 5);
            let refs: Vec<&Sample> = samples.iter().collect();
            let labels: Vec<ThresholdLabels> = samples.iter().map(|s| s.labels.unwrap()).collect();
            let batch = PctnBatch::new(&refs).unwrap();
            let mut g = Graph::new();
            let vars = m.forward(&mut g, &m.store, &batch).unwrap();
            let loss = m.loss(&mut g, &vars, &labels).unwrap();
            let outs = m.outputs(&g, &vars);
            let oracle = termwise_loss(&outs, &labels, gated);
            assert!((g.value(loss).item() - oracle).abs() < 1e-6);
        }
    }

    #[test]
    fn confident_correct_prediction_has_tiny_loss() {
        let mut m = model(PctnConfig::default());
        zero_params(&mut m.store, &["head."]);
        let label = ThresholdLabels { t1: 4, t2: 10.0, t3: 1.0, t4: 1.0 };
        let hb = m.store.get_mut(m.hours.b).data_mut();
        hb[2] = 30.0;
        let gb = m.gate.as_ref().unwrap().b;
        m.store.get_mut(gb).data_mut().fill(-30.0);
        // Push t2 onto the label: theta_2 = mu_2 + alpha * sigma with tiny sigma.
        let alpha = std::f64::consts::LN_2 + ALPHA_FLOOR;
        let db = m.store.get_mut(m.dist.b).data_mut();
        db[4..].fill(-60.0);
        let mut samples = random_samples(2, 6);
        for s in &mut samples {
            s.start_hour = 9;
            s.labels = Some(label);
        }
        db[1] = 10.0 - alpha * SIGMA_FLOOR;
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut g = Graph::new();
        let l = m.batch_loss(&mut g, &m.store, &refs).unwrap();
        assert!(g.value(l).item() < 0.01, "{}", g.value(l).item());
    }

    #[test]
    fn full_model_gradient_check() {
        for gated in [true, false] {
            let m = PctnModel::new(
                PctnConfig {
                    use_gate: gated,
                    ..tiny_config()
                },
                TargetScale {
                    loc: [4.0, 12.0, 0.5, 0.3],
                    scale: [1.5, 6.0, 0.8, 0.6],
                },
            )
            .unwrap();
            let samples = random_samples(4, 7);
            let refs: Vec<&Sample> = samples.iter().collect();
            let report = check_params(&m.store, DEFAULT_EPS, DEFAULT_TOL, Some(6), |g, store| {
                m.batch_loss(g, store, &refs)
            })
            .unwrap();
            assert!(report.passed(), "gated={gated}: {report:?}");
        }
    }

    #[test]
    fn hourly_rows_are_deduplicated() {
        let mut samples = random_samples(6, 8);
        for s in &mut samples[1..4] {
            s.x[HOURLY_START..HOURLY_END].copy_from_slice(&samples_hourly());
        }
        let refs: Vec<&Sample> = samples.iter().collect();
        let b = PctnBatch::new(&refs).unwrap();
        assert_eq!(b.hourly.rows(), 4);
        assert_eq!(b.row_of[1], b.row_of[3]);
        assert_eq!(b.width, 3);
        assert_eq!(b.query_index.len(), 12);
        for (i, &slot) in b.slot_of.iter().enumerate() {
            assert_eq!(b.query_index[slot], i);
        }
        let m = model(tiny_config());
        let batched = m.predict_batch(&refs).unwrap();
        for (i, s) in samples.iter().enumerate() {
            let single = m.predict_batch(&[s]).unwrap();
            for (a, c) in single[0].t_hat.iter().zip(&batched[i].t_hat) {
                assert!((a - c).abs() < 1e-12);
            }
        }
    }

    fn samples_hourly() -> Vec<f64> {
        (0..N_HOURLY).map(|i| i as f64 * 0.01).collect()
    }

    #[test]
    fn config_and_checkpoint_roundtrip() {
        let m = PctnModel::new(
            tiny_config(),
            TargetScale {
                loc: [4.0, 12.0, 0.5, 0.25],
                scale: [1.5, 6.0, 0.8, 0.6],
            },
        )
        .unwrap();
        let ck = Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap();
        let back = PctnModel::from_checkpoint(&ck).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.scale, m.scale);
        let samples = random_samples(3, 9);
        let a = m.predict(&samples).unwrap();
        let b = back.predict(&samples).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.t_hat.iter().zip(&y.t_hat) {
                assert!((p - q).abs() < 1e-3 * (1.0 + p.abs()));
            }
        }
        let mut wrong = ck.clone();
        wrong.kind = "itransformer".into();
        assert!(PctnModel::from_checkpoint(&wrong).is_err());
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let samples = random_samples(96, 10);
        let cfg = PctnConfig {
            train: TrainConfig {
                epochs: 5,
                batch_size: 16,
                lr_max: 3e-3,
                val_fraction: 0.2,
                ..Default::default()
            },
            ..tiny_config()
        };
        let (a, ra) = train(&samples, &cfg).unwrap();
        let (b, _) = train(&samples, &cfg).unwrap();
        assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
        assert!(ra.train_loss[4] < ra.train_loss[0], "{:?}", ra.train_loss);
        let (f, rf) = finetune(&a, &samples, 5).unwrap();
        assert_eq!(rf.epochs_run(), 5);
        assert_ne!(f.store, a.store);
        assert!(finetune(&a, &samples, 4).is_err());
    }

    #[test]
    fn schema_and_label_errors() {
        let mut samples = random_samples(4, 11);
        samples[0].x.pop();
        assert!(matches!(train(&samples, &tiny_config()), Err(Error::Schema(_))));
        assert!(class_index(9).is_err() && class_index(1).is_err());
        assert_eq!(class_index(2).unwrap(), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn structural_invariants(seed in 0u64..1000, gated: bool, spread in 0.1f64..20.0) {
            let m = PctnModel::new(PctnConfig { use_gate: gated, seed, ..tiny_config() }, TargetScale::default()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut samples = random_samples(8, seed);
            for s in &mut samples {
                s.x.iter_mut().for_each(|v| *v = rng.random_range(-spread..spread));
            }
            let refs: Vec<&Sample> = samples.iter().collect();
            for o in m.predict_batch(&refs).unwrap() {
                prop_assert!((2.0..=8.0).contains(&o.t_hat[0]));
                prop_assert!(o.t_hat[2] >= 1.0 && o.t_hat[3] >= 1.0);
                prop_assert!(o.sigma.iter().all(|&s| s >= SIGMA_FLOOR));
                prop_assert!(o.alpha.iter().all(|&a| a >= ALPHA_FLOOR));
                prop_assert!((o.p_hours.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                if let (Some(a), Some(b)) = (o.gate_total, o.gate_hourly) {
                    prop_assert!(a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0);
                }
            }
        }
    }
}
