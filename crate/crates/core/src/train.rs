//! Shared training loop: cell-day batching, AdamW with cosine annealing,
//! early stopping with best-parameter restore.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{Sample, N_FEATURES};
use crate::kv::KeyValues;
use crate::nn::optim::{cosine_lr, Adam, AdamConfig, EarlyStopping, StopDecision};
use crate::nn::{Graph, ParamStore, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub weight_decay: f64,
    pub val_fraction: f64,
    /// Keep at most this many training samples (whole cell-days, evenly
    /// spaced); 0 keeps everything.
    pub sample_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            lr_max: 1e-3,
            lr_min: 1e-5,
            batch_size: 256,
            patience: 8,
            weight_decay: 0.01,
            val_fraction: 0.15,
            sample_cap: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config("epochs, batch size and patience must be positive".into()));
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!("learning rates {} -> {} invalid", self.lr_max, self.lr_min)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return Err(Error::Config(format!("validation fraction {} outside (0, 0.5)", self.val_fraction)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KeyValues, prefix: &str) {
        kv.set(format!("{prefix}epochs"), self.epochs);
        kv.set(format!("{prefix}lr_max"), self.lr_max);
        kv.set(format!("{prefix}lr_min"), self.lr_min);
        kv.set(format!("{prefix}batch_size"), self.batch_size);
        kv.set(format!("{prefix}patience"), self.patience);
        kv.set(format!("{prefix}weight_decay"), self.weight_decay);
        kv.set(format!("{prefix}val_fraction"), self.val_fraction);
        kv.set(format!("{prefix}sample_cap"), self.sample_cap);
    }

    pub fn read_kv(&mut self, kv: &KeyValues, prefix: &str) -> Result<()> {
        kv.read_into(&format!("{prefix}epochs"), &mut self.epochs)?;
        kv.read_into(&format!("{prefix}lr_max"), &mut self.lr_max)?;
        kv.read_into(&format!("{prefix}lr_min"), &mut self.lr_min)?;
        kv.read_into(&format!("{prefix}batch_size"), &mut self.batch_size)?;
        kv.read_into(&format!("{prefix}patience"), &mut self.patience)?;
        kv.read_into(&format!("{prefix}weight_decay"), &mut self.weight_decay)?;
        kv.read_into(&format!("{prefix}val_fraction"), &mut self.val_fraction)?;
        kv.read_into(&format!("{prefix}sample_cap"), &mut self.sample_cap)?;
        Ok(())
    }
}

/// A model the loop can optimise.
pub trait Trainable {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Scalar mean loss of a labelled batch, evaluated with `store`.
    fn batch_loss(&self, g: &mut Graph, store: &ParamStore, batch: &[&Sample]) -> Result<Var>;
    /// Most samples evaluated in one graph. Larger batches are split and
    /// their gradients combined with sample weights, which leaves the
    /// batch-mean gradient unchanged.
    fn micro_batch(&self) -> usize {
        usize::MAX
    }
}

/// Mean loss and its parameter gradients over `batch`, one graph per
/// micro-batch.
fn batch_gradients<M: Trainable>(model: &M, batch: &[&Sample]) -> Result<(f64, Vec<Vec<f64>>)> {
    let micro = model.micro_batch().max(1);
    if batch.len() <= micro {
        let mut g = Graph::new();
        let loss = model.batch_loss(&mut g, model.params(), batch)?;
        g.backward(loss)?;
        return Ok((g.value(loss).item(), g.param_grads(model.params())));
    }
    let mut total = 0.0;
    let mut grads: Vec<Vec<f64>> = Vec::new();
    for chunk in batch.chunks(micro) {
        let w = chunk.len() as f64 / batch.len() as f64;
        let mut g = Graph::new();
        let loss = model.batch_loss(&mut g, model.params(), chunk)?;
        g.backward(loss)?;
        total += w * g.value(loss).item();
        let part = g.param_grads(model.params());
        if grads.is_empty() {
            grads = part.into_iter().map(|v| v.into_iter().map(|x| w * x).collect()).collect();
        } else {
            for (acc, p) in grads.iter_mut().zip(part) {
                acc.iter_mut().zip(p).for_each(|(a, x)| *a += w * x);
            }
        }
    }
    Ok((total, grads))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.train_loss.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for (e, t) in self.train_loss.iter().enumerate() {
            let v = self.val_loss.get(e).map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{t},{v}\n", e + 1));
        }
        out
    }
}

/// Every sample must carry 123 features and labels.
pub fn check_schema(samples: &[Sample], stage: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Schema(format!("{stage}: no samples")));
    }
    for s in samples {
        if s.x.len() != N_FEATURES {
            return Err(Error::Schema(format!(
                "{stage}: sample {} {} has {} features, expected {N_FEATURES}",
                s.cell_id,
                s.date,
                s.x.len()
            )));
        }
        s.labels()?;
    }
    Ok(())
}

/// Sample indices grouped by cell-day, ordered by (date, cell).
pub fn group_by_cell_day(samples: &[Sample]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<(NaiveDate, &str), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry((s.date, s.cell_id.as_str())).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Validation groups come from the latest date, at most `fraction` of all
/// groups (and at least one). Returns `(train, val)`.
pub fn validation_split(samples: &[Sample], groups: Vec<Vec<usize>>, fraction: f64) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    let last = groups
        .iter()
        .map(|g| samples[g[0]].date)
        .max()
        .ok_or_else(|| Error::Config("no training groups".into()))?;
    let cap = ((fraction * groups.len() as f64).floor() as usize).max(1);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for g in groups {
        if samples[g[0]].date == last && val.len() < cap {
            val.push(g);
        } else {
            train.push(g);
        }
    }
    if train.is_empty() {
        return Err(Error::Config("validation split left no training data".into()));
    }
    Ok((train, val))
}

/// Evenly spaced subset of groups holding at most `cap` samples.
pub fn cap_groups(groups: Vec<Vec<usize>>, cap: usize) -> Vec<Vec<usize>> {
    let total: usize = groups.iter().map(Vec::len).sum();
    if cap == 0 || total <= cap {
        return groups;
    }
    let per = total as f64 / groups.len() as f64;
    let keep = ((cap as f64 / per).floor() as usize).clamp(1, groups.len());
    let step = groups.len() as f64 / keep as f64;
    let picks: Vec<usize> = (0..keep).map(|i| (i as f64 * step) as usize).collect();
    let mut out = Vec::with_capacity(keep);
    let mut it = picks.into_iter().peekable();
    for (i, g) in groups.into_iter().enumerate() {
        if it.peek() == Some(&i) {
            out.push(g);
            it.next();
        }
    }
    out
}

/// Pack whole groups into batches of at least `batch_size` samples (the
/// last one may be smaller).
pub fn pack_batches(groups: &[Vec<usize>], order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    for &gi in order {
        cur.extend_from_slice(&groups[gi]);
        if cur.len() >= batch_size {
            batches.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

fn batches_per_epoch(groups: &[Vec<usize>], batch_size: usize) -> usize {
    let order: Vec<usize> = (0..groups.len()).collect();
    pack_batches(groups, &order, batch_size).len()
}

/// Sample-weighted mean loss over `groups`, no gradients kept.
pub fn eval_loss<M: Trainable + Sync>(model: &M, samples: &[Sample], groups: &[Vec<usize>], batch_size: usize) -> Result<f64> {
    let order: Vec<usize> = (0..groups.len()).collect();
    let batches = pack_batches(groups, &order, batch_size);
    let micro = model.micro_batch().max(1);
    let parts = crate::par::map(&batches, |b| -> Result<(f64, usize)> {
        let mut sum = 0.0;
        for chunk in b.chunks(micro) {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mut g = Graph::new();
            let l = model.batch_loss(&mut g, model.params(), &refs)?;
            sum += g.value(l).item() * chunk.len() as f64;
        }
        Ok((sum, b.len()))
    });
    let mut sum = 0.0;
    let mut n = 0;
    for p in parts {
        let (s, k) = p?;
        sum += s;
        n += k;
    }
    Ok(sum / n.max(1) as f64)
}

/// Optimise `model` on `train` groups. With non-empty `val` groups the loop
/// stops after `patience` epochs without improvement and restores the best
/// parameters.
pub fn fit<M: Trainable + Sync>(
    model: &mut M,
    samples: &[Sample],
    train: &[Vec<usize>],
    val: &[Vec<usize>],
    cfg: &TrainConfig,
    seed: u64,
    stage: &str,
) -> Result<TrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut adam = Adam::new(AdamConfig::adamw(cfg.weight_decay), model.params());
    let total_steps = cfg.epochs * batches_per_epoch(train, cfg.batch_size);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best: Option<ParamStore> = None;
    let mut report = TrainReport::default();
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let batches = pack_batches(train, &order, cfg.batch_size);
        let mut sum = 0.0;
        let mut n = 0;
        for (bi, b) in batches.iter().enumerate() {
            let lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min)?;
            let refs: Vec<&Sample> = b.iter().map(|&i| &samples[i]).collect();
            let (lv, grads) = batch_gradients(model, &refs)?;
            if !lv.is_finite() {
                return Err(Error::Diverged(format!(
                    "{stage}: loss {lv} at epoch {} batch {} (lr {lr:.3e}, {} samples)",
                    epoch + 1,
                    bi + 1,
                    b.len()
                )));
            }
            adam.update(model.params_mut(), &grads, lr)?;
            sum += lv * b.len() as f64;
            n += b.len();
            step += 1;
        }
        let train_loss = sum / n.max(1) as f64;
        report.train_loss.push(train_loss);
        if val.is_empty() {
            log::info!("{stage}: epoch {} train {train_loss:.5}", epoch + 1);
            continue;
        }
        let vl = eval_loss(model, samples, val, cfg.batch_size)?;
        if !vl.is_finite() {
            return Err(Error::Diverged(format!("{stage}: validation loss {vl} at epoch {}", epoch + 1)));
        }
        report.val_loss.push(vl);
        log::info!("{stage}: epoch {} train {train_loss:.5} val {vl:.5}", epoch + 1);
        let (improved, decision) = stopper.observe(vl);
        if improved {
            best = Some(model.params().clone());
            report.best_epoch = Some(epoch + 1);
        }
        if decision == StopDecision::Stop {
            report.stopped_early = true;
            break;
        }
    }
    if let Some(b) = best {
        *model.params_mut() = b;
    }
    Ok(report)
}
