//! Inverted transformer with quantile heads.
//!
//! Every one of the 123 input features is a token: a per-feature affine map
//! embeds the scalar into `d_model` dimensions, pre-norm encoder layers
//! attend across features, and the mean token feeds a linear head with
//! P10/P50/P90 outputs for each of the four targets. Training uses the raw
//! (possibly crossing) quantiles; inference sorts them per target and takes
//! P90 as the threshold.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::mean_std;
use crate::features::{Sample, N_FEATURES};
use crate::kv::{join, KeyValues};
use crate::labels::{percentile, TARGET_NAMES};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::layers::{EncoderLayer, LayerNorm, Linear};
use crate::nn::loss::QUANTILES;
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::pctn::load_params;
use crate::train::{self, TrainConfig, TrainReport, Trainable};

pub const KIND: &str = "itransformer";
pub const N_OUTPUTS: usize = 12;

const ATTENTION_BUDGET: usize = 1 << 24;

#[derive(Clone, Debug, PartialEq)]
pub struct ITransformerConfig {
    pub d_model: usize,
    pub layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for ITransformerConfig {
    fn default() -> Self {
        ITransformerConfig {
            d_model: 128,
            layers: 4,
            n_heads: 8,
            ff_dim: 512,
            seed: 42,
            train: TrainConfig::default(),
        }
    }
}

impl ITransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.layers == 0 || self.n_heads == 0 || self.ff_dim == 0 {
            return Err(Error::Config("itransformer dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        self.train.validate()
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("n_features", N_FEATURES);
        kv.set("d_model", self.d_model);
        kv.set("layers", self.layers);
        kv.set("n_heads", self.n_heads);
        kv.set("ff_dim", self.ff_dim);
        kv.set("quantiles", join(&QUANTILES));
        kv.set("seed", self.seed);
        self.train.write_kv(kv, "train.");
    }

    pub fn read_kv(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(n) = kv.get::<usize>("n_features")? {
            if n != N_FEATURES {
                return Err(Error::Config(format!("n_features is fixed at {N_FEATURES}, got {n}")));
            }
        }
        if let Some(q) = kv.get_list::<f64>("quantiles")? {
            if q != QUANTILES {
                return Err(Error::Config(format!("quantiles are fixed at {QUANTILES:?}, got {q:?}")));
            }
        }
        kv.read_into("d_model", &mut self.d_model)?;
        kv.read_into("layers", &mut self.layers)?;
        kv.read_into("n_heads", &mut self.n_heads)?;
        kv.read_into("ff_dim", &mut self.ff_dim)?;
        kv.read_into("seed", &mut self.seed)?;
        self.train.read_kv(kv, "train.")
    }
}

/// Sorted quantiles per target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantilePrediction {
    /// `q[target] = [q10, q50, q90]`, non-decreasing.
    pub q: [[f64; 3]; 4],
}

impl QuantilePrediction {
    pub fn from_raw(raw: &[f64]) -> Self {
        QuantilePrediction {
            q: std::array::from_fn(|t| {
                let mut v = [raw[3 * t], raw[3 * t + 1], raw[3 * t + 2]];
                v.sort_by(f64::total_cmp);
                v
            }),
        }
    }

    /// The P90 threshold per target.
    pub fn thresholds(&self) -> [f64; 4] {
        self.q.map(|q| q[2])
    }

    pub fn spread(&self) -> [f64; 4] {
        self.q.map(|q| q[2] - q[0])
    }
}

#[derive(Clone, Debug)]
pub struct ITransformer {
    pub config: ITransformerConfig,
    /// Label-unit location and scale of each target; outputs are
    /// `loc + scale * head`.
    pub loc: [f64; 4],
    pub scale: [f64; 4],
    pub store: ParamStore,
    embed_w: ParamId,
    embed_b: ParamId,
    encoders: Vec<EncoderLayer>,
    final_norm: LayerNorm,
    head: Linear,
}

impl ITransformer {
    pub fn new(config: ITransformerConfig, loc: [f64; 4], scale: [f64; 4]) -> Result<Self> {
        config.validate()?;
        if scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!("target scales must be positive, got {scale:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let embed_w = store.add_uniform("embed.w", &[N_FEATURES, d], 1, &mut rng);
        let embed_b = store.add_uniform("embed.b", &[N_FEATURES, d], 1, &mut rng);
        let encoders = (0..config.layers)
            .map(|l| EncoderLayer::new(&mut store, &format!("enc{l}"), d, config.n_heads, config.ff_dim, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(&mut store, "final_ln", d);
        let head = Linear::new(&mut store, "head", d, N_OUTPUTS, &mut rng);
        Ok(ITransformer {
            config,
            loc,
            scale,
            store,
            embed_w,
            embed_b,
            encoders,
            final_norm,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Location and scale from the training labels.
    pub fn fit_target_scale(samples: &[&Sample]) -> Result<([f64; 4], [f64; 4])> {
        let labels = samples.iter().map(|s| s.labels().map(|l| l.to_array())).collect::<Result<Vec<_>>>()?;
        let ms = mean_std(&labels);
        Ok((ms.map(|(m, _)| m), ms.map(|(_, s)| if s > 1e-6 { s } else { 1.0 })))
    }

    /// Start each head bias at the matching empirical quantile of the
    /// training labels.
    pub fn init_head_bias(&mut self, samples: &[&Sample]) -> Result<()> {
        let labels = samples.iter().map(|s| s.labels().map(|l| l.to_array())).collect::<Result<Vec<_>>>()?;
        let b = self.store.get_mut(self.head.b).data_mut();
        for t in 0..4 {
            let col: Vec<f64> = labels.iter().map(|l| l[t]).collect();
            for (qi, &q) in QUANTILES.iter().enumerate() {
                b[3 * t + qi] = (percentile(&col, q) - self.loc[t]) / self.scale[t];
            }
        }
        Ok(())
    }

    /// Mean-pooled token representation `[n, d_model]` of `x` `[n, 123]`.
    pub fn pooled(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != N_FEATURES {
            return Err(Error::Shape(format!("itransformer input {shape:?}, expected [n, {N_FEATURES}]")));
        }
        let w = g.param(store, self.embed_w);
        let b = g.param(store, self.embed_b);
        let mut h = g.feature_embed(x, w, b)?;
        for enc in &self.encoders {
            h = enc.forward(g, store, h)?;
        }
        let h = self.final_norm.forward(g, store, h)?;
        g.mean_tokens(h)
    }

    /// Raw quantile outputs `[n, 12]` in label units, ordered
    /// `t1 (q10, q50, q90), t2 (...), ...`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let p = self.pooled(g, store, x)?;
        let raw = self.head.forward(g, store, p)?;
        let scale: Vec<f64> = self.scale.iter().flat_map(|&s| [s; 3]).collect();
        let loc: Vec<f64> = self.loc.iter().flat_map(|&m| [m; 3]).collect();
        let scale = g.constant(Tensor::vector(scale));
        let loc = g.constant(Tensor::vector(loc));
        let y = g.mul_tiled(raw, scale)?;
        g.add_tiled(y, loc)
    }

    /// Mean over targets of the three-quantile pinball loss.
    pub fn loss(&self, g: &mut Graph, out: Var, labels: &[[f64; 4]]) -> Result<Var> {
        let mut total: Option<Var> = None;
        for t in 0..4 {
            let y: Vec<f64> = labels.iter().map(|l| l[t]).collect();
            for (qi, &tau) in QUANTILES.iter().enumerate() {
                let col = 3 * t + qi;
                let pred = g.slice_cols(out, col, col + 1)?;
                let l = g.pinball(pred, &y, tau)?;
                total = Some(match total {
                    Some(acc) => g.add(acc, l)?,
                    None => l,
                });
            }
        }
        let total = total.expect("twelve terms");
        Ok(g.scale(total, 1.0 / N_OUTPUTS as f64))
    }

    fn input(samples: &[&Sample]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(samples.len() * N_FEATURES);
        for s in samples {
            if s.x.len() != N_FEATURES {
                return Err(Error::Shape(format!("{} features, expected {N_FEATURES}", s.x.len())));
            }
            data.extend_from_slice(&s.x);
        }
        Tensor::new(vec![samples.len(), N_FEATURES], data)
    }

    pub fn predict_batch(&self, samples: &[&Sample]) -> Result<Vec<QuantilePrediction>> {
        let mut g = Graph::new();
        let x = g.constant(Self::input(samples)?);
        let out = self.forward(&mut g, &self.store, x)?;
        let v = g.value(out);
        Ok((0..samples.len()).map(|i| QuantilePrediction::from_raw(v.row(i))).collect())
    }

    /// Samples per graph that keep the attention maps of one micro-batch
    /// near `ATTENTION_BUDGET` scalars.
    pub fn micro_batch(&self) -> usize {
        let per_sample = self.config.n_heads * N_FEATURES * N_FEATURES * self.config.layers;
        (ATTENTION_BUDGET / per_sample).max(1)
    }

    /// Predictions in input order, batches evaluated in parallel.
    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<QuantilePrediction>> {
        let bs = self.config.train.batch_size.min(self.micro_batch());
        let chunks: Vec<&[Sample]> = samples.chunks(bs).collect();
        let parts = crate::par::map(&chunks, |c| {
            let refs: Vec<&Sample> = c.iter().collect();
            self.predict_batch(&refs)
        });
        let mut out = Vec::with_capacity(samples.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    pub fn config_text(&self) -> String {
        let mut kv = KeyValues::new();
        self.config.write_kv(&mut kv);
        kv.set("target_loc", join(&self.loc));
        kv.set("target_scale", join(&self.scale));
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
        let mut config = ITransformerConfig::default();
        config.read_kv(&kv)?;
        let get = |key: &str| -> Result<[f64; 4]> {
            let v: Vec<f64> = kv.get_list(key)?.ok_or_else(|| Error::Config(format!("missing {key}")))?;
            v.try_into().map_err(|_| Error::Config(format!("{key} needs 4 values")))
        };
        let mut model = ITransformer::new(config, get("target_loc")?, get("target_scale")?)?;
        load_params(&mut model.store, &ck.params)?;
        Ok(model)
    }
}

impl Trainable for ITransformer {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn batch_loss(&self, g: &mut Graph, store: &ParamStore, batch: &[&Sample]) -> Result<Var> {
        let x = g.constant(Self::input(batch)?);
        let out = self.forward(g, store, x)?;
        let labels = batch.iter().map(|s| s.labels().map(|l| l.to_array())).collect::<Result<Vec<_>>>()?;
        self.loss(g, out, &labels)
    }

    fn micro_batch(&self) -> usize {
        self.micro_batch()
    }
}

pub fn train(samples: &[Sample], config: &ITransformerConfig) -> Result<(ITransformer, TrainReport)> {
    config.validate()?;
    train::check_schema(samples, "train itransformer")?;
    let groups = train::group_by_cell_day(samples);
    let (tr, val) = train::validation_split(samples, groups, config.train.val_fraction)?;
    let tr = train::cap_groups(tr, config.train.sample_cap);
    let refs: Vec<&Sample> = tr.iter().flatten().map(|&i| &samples[i]).collect();
    let (loc, scale) = ITransformer::fit_target_scale(&refs)?;
    let mut model = ITransformer::new(config.clone(), loc, scale)?;
    model.init_head_bias(&refs)?;
    let report = train::fit(&mut model, samples, &tr, &val, &config.train, config.seed, "train itransformer")?;
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpreadStats {
    pub target: &'static str,
    pub mean: f64,
    pub std: f64,
    /// Spreads above `mean + 2 * std` are flagged for review.
    pub flag_above: f64,
    pub flagged: Vec<usize>,
}

/// Per-target mean and population std of the P10-P90 spread, with the
/// indices of samples whose spread exceeds `mean + 2 * std`.
pub fn quantile_spread_report(preds: &[QuantilePrediction]) -> Vec<SpreadStats> {
    let spreads: Vec<[f64; 4]> = preds.iter().map(|p| p.spread()).collect();
    mean_std(&spreads)
        .iter()
        .enumerate()
        .map(|(t, &(mean, std))| {
            let flag_above = mean + 2.0 * std;
            SpreadStats {
                target: TARGET_NAMES[t],
                mean,
                std,
                flag_above,
                flagged: spreads
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s[t] > flag_above)
                    .map(|(i, _)| i)
                    .collect(),
            }
        })
        .collect()
}

pub fn spread_report_csv(stats: &[SpreadStats]) -> String {
    let mut s = String::from("target,mean_spread,std_spread,flag_above,n_flagged\n");
    for st in stats {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{}", st.target, st.mean, st.std, st.flag_above, st.flagged.len());
    }
    s
}

pub fn prediction_header() -> String {
    let mut cols = vec!["cell_id".to_string(), "date".into(), "start_hour".into()];
    cols.extend(TARGET_NAMES.iter().map(|t| format!("{t}_hat")));
    for t in TARGET_NAMES {
        for p in ["q10", "q50", "q90", "spread"] {
            cols.push(format!("{p}_{t}"));
        }
    }
    cols.join(",")
}

pub fn predictions_csv(samples: &[Sample], preds: &[QuantilePrediction]) -> String {
    let mut s = prediction_header();
    s.push('\n');
    for (x, p) in samples.iter().zip(preds) {
        let _ = write!(s, "{},{},{}", x.cell_id, x.date.format(crate::ingest::DATE_FORMAT), x.start_hour);
        for v in p.thresholds() {
            let _ = write!(s, ",{v}");
        }
        for (q, sp) in p.q.iter().zip(p.spread()) {
            let _ = write!(s, ",{},{},{},{sp}", q[0], q[1], q[2]);
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::ThresholdLabels;
    use crate::nn::gradcheck::{check_params, DEFAULT_EPS, DEFAULT_TOL};
    use crate::nn::loss::pinball;
    use chrono::NaiveDate;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny() -> ITransformerConfig {
        ITransformerConfig {
            d_model: 8,
            layers: 1,
            n_heads: 2,
            ff_dim: 8,
            ..Default::default()
        }
    }

    fn samples(n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let t3 = if rng.random_bool(0.3) { rng.random_range(1.5..4.0) } else { 1.0 };
                Sample {
                    cell_id: format!("C{}", i / 4),
                    date: NaiveDate::from_ymd_opt(2024, 3, 1 + (i % 3) as u32).unwrap(),
                    start_hour: rng.random_range(1..=24),
                    x: (0..N_FEATURES).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    labels: Some(ThresholdLabels {
                        t1: rng.random_range(2..=8),
                        t2: rng.random_range(5.0..40.0),
                        t3,
                        t4: t3.min(2.0),
                    }),
                }
            })
            .collect()
    }

    fn model(cfg: ITransformerConfig) -> ITransformer {
        ITransformer::new(cfg, [4.0, 12.0, 1.2, 1.1], [1.5, 6.0, 0.5, 0.3]).unwrap()
    }

    #[test]
    fn default_matches_reference_size() {
        let m = model(ITransformerConfig::default());
        let (d, ff, p) = (128, 512, N_FEATURES);
        let encoder = 4 * d * d + 3 * d + (d * ff + ff + ff * d + d) + 4 * d;
        assert_eq!(m.num_params(), 2 * p * d + 4 * encoder + 2 * d + d * N_OUTPUTS + N_OUTPUTS);
        assert_eq!(m.num_params(), 825_868);
        assert_eq!(m.encoders.len(), 4);
    }

    #[test]
    fn output_shape_and_input_check() {
        let m = model(tiny());
        let s = samples(5, 1);
        let mut g = Graph::new();
        let refs: Vec<&Sample> = s.iter().collect();
        let x = g.constant(ITransformer::input(&refs).unwrap());
        let out = m.forward(&mut g, &m.store, x).unwrap();
        assert_eq!(g.shape(out), &[5, 12]);
        let bad = g.constant(Tensor::zeros(&[2, 122]));
        assert!(matches!(m.forward(&mut g, &m.store, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_examples() {
        let m = model(tiny());
        let mut g = Graph::new();
        let out = g.input(Tensor::new(vec![1, 12], [0.0, 1.0, 2.0].repeat(4)).unwrap());
        let l = m.loss(&mut g, out, &[[1.0; 4]]).unwrap();
        assert!((g.value(l).item() - 0.2 / 3.0).abs() < 1e-12);

        let perfect = g.input(Tensor::new(vec![1, 12], vec![3.0; 12]).unwrap());
        let l = m.loss(&mut g, perfect, &[[3.0; 4]]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn loss_is_termwise_mean() {
        let m = model(tiny());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 6;
        let raw: Vec<f64> = (0..n * 12).map(|_| rng.random_range(-5.0..5.0)).collect();
        let labels: Vec<[f64; 4]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-5.0..5.0))).collect();
        let mut g = Graph::new();
        let out = g.input(Tensor::new(vec![n, 12], raw.clone()).unwrap());
        let l = m.loss(&mut g, out, &labels).unwrap();
        let mut want = 0.0;
        for t in 0..4 {
            let y: Vec<f64> = labels.iter().map(|l| l[t]).collect();
            for (qi, &tau) in QUANTILES.iter().enumerate() {
                let p: Vec<f64> = (0..n).map(|i| raw[i * 12 + 3 * t + qi]).collect();
                want += pinball(&y, &p, tau).unwrap();
            }
        }
        assert!((g.value(l).item() - want / 12.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_check() {
        let m = model(tiny());
        let s = samples(4, 2);
        let refs: Vec<&Sample> = s.iter().collect();
        let report = check_params(&m.store, DEFAULT_EPS, DEFAULT_TOL, Some(8), |g, store| m.batch_loss(g, store, &refs)).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn permuting_features_with_embeddings_keeps_pooled_output() {
        let m = model(tiny());
        let s = samples(3, 4);
        let refs: Vec<&Sample> = s.iter().collect();
        let x = ITransformer::input(&refs).unwrap();
        let (a, b) = (5, 90);
        let mut xp = x.clone();
        for r in 0..3 {
            xp.data_mut().swap(r * N_FEATURES + a, r * N_FEATURES + b);
        }
        let mut store = m.store.clone();
        let d = m.config.d_model;
        for id in [m.embed_w, m.embed_b] {
            let t = store.get_mut(id).data_mut();
            for k in 0..d {
                t.swap(a * d + k, b * d + k);
            }
        }
        // Parameter nodes are cached per graph, so each store gets its own.
        let pooled = |store: &ParamStore, x: Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x);
            let p = m.pooled(&mut g, store, xv).unwrap();
            g.value(p).clone()
        };
        let p0 = pooled(&m.store, x);
        let p1 = pooled(&store, xp.clone());
        for (u, v) in p0.data().iter().zip(p1.data()) {
            assert!((u - v).abs() < 1e-9);
        }
        // Without the embedding swap the features are distinguishable.
        let p2 = pooled(&m.store, xp);
        assert!(p0.data().iter().zip(p2.data()).any(|(u, v)| (u - v).abs() > 1e-6));
    }

    #[test]
    fn constant_model_has_no_spread_or_flags() {
        let preds = vec![QuantilePrediction::from_raw(&[2.0; 12]); 10];
        for st in quantile_spread_report(&preds) {
            assert_eq!((st.mean, st.std), (0.0, 0.0));
            assert!(st.flagged.is_empty());
        }
    }

    #[test]
    fn spread_flags_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let preds: Vec<QuantilePrediction> = (0..200)
            .map(|i| {
                let mut raw: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..3.0)).collect();
                if i % 37 == 0 {
                    raw[2] += 40.0;
                }
                QuantilePrediction::from_raw(&raw)
            })
            .collect();
        let report = quantile_spread_report(&preds);
        for (t, st) in report.iter().enumerate() {
            let sp: Vec<f64> = preds.iter().map(|p| p.q[t][2] - p.q[t][0]).collect();
            let n = sp.len() as f64;
            let mean = sp.iter().sum::<f64>() / n;
            let std = (sp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let want: Vec<usize> = (0..sp.len()).filter(|&i| sp[i] > mean + 2.0 * std).collect();
            assert!((st.mean - mean).abs() < 1e-12 && (st.std - std).abs() < 1e-12);
            assert_eq!(st.flagged, want);
        }
        assert!(!report[0].flagged.is_empty());
        assert_eq!(spread_report_csv(&report).lines().count(), 5);
    }

    #[test]
    fn checkpoint_roundtrip_and_csv() {
        let m = model(tiny());
        let ck = Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap();
        let back = ITransformer::from_checkpoint(&ck).unwrap();
        assert_eq!((back.config.clone(), back.loc, back.scale), (m.config.clone(), m.loc, m.scale));
        let s = samples(3, 6);
        let (a, b) = (m.predict(&s).unwrap(), back.predict(&s).unwrap());
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.thresholds().iter().zip(y.thresholds()) {
                assert!((p - q).abs() < 1e-3 * (1.0 + p.abs()));
            }
        }
        let mut wrong = ck;
        wrong.kind = "pctn".into();
        assert!(ITransformer::from_checkpoint(&wrong).is_err());
        let csv = predictions_csv(&s, &a);
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 3 + 4 + 16);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let s = samples(96, 7);
        let cfg = ITransformerConfig {
            train: TrainConfig {
                epochs: 4,
                batch_size: 16,
                lr_max: 3e-3,
                val_fraction: 0.3,
                ..Default::default()
            },
            ..tiny()
        };
        let (a, ra) = train(&s, &cfg).unwrap();
        let (b, _) = train(&s, &cfg).unwrap();
        assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
        assert!(ra.train_loss[3] < ra.train_loss[0], "{:?}", ra.train_loss);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn sorted_quantiles(seed in 0u64..1000, spread in 0.1f64..20.0) {
            let m = model(ITransformerConfig { seed, ..tiny() });
            let mut s = samples(8, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for x in &mut s {
                x.x.iter_mut().for_each(|v| *v = rng.random_range(-spread..spread));
            }
            for p in m.predict(&s).unwrap() {
                for q in p.q {
                    prop_assert!(q[0] <= q[1] && q[1] <= q[2]);
                }
                prop_assert!(p.spread().iter().all(|&v| v >= 0.0));
            }
        }
    }
}
