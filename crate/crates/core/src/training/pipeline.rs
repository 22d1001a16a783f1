use std::fmt;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{cross_entropy, masked_loss, LossConfig, LossParts};
use super::optim::AdamW;
use super::mix_seed;
use crate::dataio::{Label, Sample};
use crate::error::{invalid, Result};
use crate::evalx::binary_metrics;
use crate::model::{Gradients, GraphS4Model, Mode, Prepared};
use crate::tasks::{build_instance, NetworkPartition, TaskInstance, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub epochs_population: usize,
    /// Epoch cap of the early-stopped stage (clinical adaptation or fine-tuning).
    pub epochs_clinical_max: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub val_fraction: f64,
    /// Lower bound on `-Re(lambda)` kept after every step.
    pub min_decay: f64,
    /// Fine-tune every tensor instead of only the last layer and the head.
    pub full_finetune: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr: 0.01,
            lr_decay: 0.95,
            weight_decay: 0.01,
            epochs_population: 20,
            epochs_clinical_max: 100,
            early_stop_patience: 5,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            val_fraction: 0.1,
            min_decay: 1e-4,
            full_finetune: false,
        }
    }
}

impl TrainConfig {
    /// Defaults for supervised fine-tuning.
    pub fn finetune_default() -> Self {
        Self { lr: 0.001, epochs_population: 0, epochs_clinical_max: 50, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("train.batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("train.lr must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(invalid("train.lr_decay must lie in (0, 1]"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("train.weight_decay must be non-negative"));
        }
        if self.early_stop_patience == 0 {
            return Err(invalid("train.early_stop_patience must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(invalid("train.beta1, train.beta2 must lie in [0, 1) and train.adam_eps must be positive"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(invalid("train.val_fraction must lie in (0, 1)"));
        }
        if !(self.min_decay > 0.0) {
            return Err(invalid("train.min_decay must be positive"));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW {
        AdamW::new((self.beta1, self.beta2), self.adam_eps, self.weight_decay)
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub mse: f64,
    pub pearson: f64,
    pub lr: f64,
}

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6e}", self.epoch, self.split, self.loss, self.mse, self.pearson, self.lr)
    }
}

/// Header line matching [`EpochMetrics`]' display.
pub const METRICS_HEADER: &str = "epoch\tsplit\tloss\tmse\tpearson\tlr";

pub fn format_log(log: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in log {
        out.push_str(&m.to_string());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct SslOutcome {
    pub model: GraphS4Model,
    pub log: Vec<EpochMetrics>,
    /// Inner-validation loss before the clinical stage.
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    /// Clinical epochs run before stopping.
    pub clinical_epochs: usize,
}

#[derive(Clone, Debug)]
pub struct ClsOutcome {
    pub model: GraphS4Model,
    pub log: Vec<EpochMetrics>,
    pub best_val_balanced_accuracy: f64,
    pub epochs: usize,
}

fn check_lengths(samples: &[&Sample], model: &GraphS4Model) -> Result<usize> {
    let t = samples[0].x.ncols();
    for s in samples {
        if s.x.nrows() != model.config.num_nodes {
            return Err(invalid(format!("sample {} has {} nodes, model expects {}", s.id, s.x.nrows(), model.config.num_nodes)));
        }
        if s.x.ncols() != t {
            return Err(invalid(format!("sample {} has {} timepoints, expected {t}", s.id, s.x.ncols())));
        }
    }
    Ok(t)
}

/// Seeded shuffle splitting off the last `fraction` (at least one item).
fn inner_split<T: Clone>(items: &[T], fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((items.len() as f64 * fraction).round() as usize).clamp(1, items.len().saturating_sub(1).max(1));
    let cut = items.len() - n_val;
    let train = order[..cut].iter().map(|&i| items[i].clone()).collect();
    let val = order[cut..].iter().map(|&i| items[i].clone()).collect();
    (train, val)
}

fn batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Sums per-sample gradients in a fixed order and averages them.
fn reduce(model: &GraphS4Model, prep: &Prepared, parts: Vec<Gradients>) -> Result<GraphS4Model> {
    let n = parts.len();
    let mut it = parts.into_iter();
    let mut total = it.next().unwrap_or_else(|| Gradients::new(model, prep));
    for g in it {
        total.merge(&g);
    }
    total.scale(1.0 / n.max(1) as f64);
    total.finish(model, prep)
}

struct SslStage<'a> {
    spec: &'a TaskSpec,
    partition: &'a NetworkPartition,
    loss: &'a LossConfig,
    cfg: &'a TrainConfig,
    t: usize,
}

impl SslStage<'_> {
    fn instance(&self, s: &Sample, seed: u64) -> Result<TaskInstance> {
        build_instance(&s.x, self.spec, self.partition, seed)
    }

    /// One pass over `data`; returns the mean training loss.
    fn epoch(&self, model: &mut GraphS4Model, opt: &mut AdamW, data: &[&Sample], epoch: usize) -> Result<LossParts> {
        let lr = self.cfg.lr_at(epoch);
        let mut parts = Vec::new();
        let epoch_seed = mix_seed(self.cfg.seed, 0x5531 ^ epoch as u64);
        for batch in batches(data.len(), self.cfg.batch_size, epoch_seed) {
            let prep = model.prepare(self.t, Mode::Conv)?;
            let m: &GraphS4Model = model;
            let results: Vec<Result<(LossParts, Gradients)>> = batch
                .par_iter()
                .map(|&i| {
                    let sample_seed = mix_seed(epoch_seed, i as u64);
                    let inst = self.instance(data[i], sample_seed)?;
                    let (pred, cache) = m.forward_seq_with(&prep, &inst.input, Some(sample_seed ^ 0xd))?;
                    let (lp, g) = masked_loss(&pred, &inst, self.loss)?;
                    let mut grads = Gradients::new(m, &prep);
                    m.backward_seq(&prep, &cache, &g, &mut grads)?;
                    Ok((lp, grads))
                })
                .collect();
            let mut grads = Vec::with_capacity(results.len());
            for r in results {
                let (lp, g) = r?;
                parts.push(lp);
                grads.push(g);
            }
            let total = reduce(model, &prep, grads)?;
            opt.step(model, &total, lr, self.cfg.min_decay, &|_| false);
        }
        Ok(LossParts::mean(&parts))
    }

    /// Mean eval-mode loss with per-sample instance seeds fixed across epochs.
    fn evaluate(&self, model: &GraphS4Model, data: &[&Sample]) -> Result<LossParts> {
        let prep = model.prepare(self.t, Mode::Conv)?;
        let seed = mix_seed(self.cfg.seed, 0x7a1);
        let parts: Result<Vec<LossParts>> = data
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let inst = self.instance(s, mix_seed(seed, i as u64))?;
                let pred = model.forward_seq_with(&prep, &inst.input, None)?.0;
                Ok(masked_loss(&pred, &inst, self.loss)?.0)
            })
            .collect();
        Ok(LossParts::mean(&parts?))
    }
}

fn metrics(epoch: usize, split: &str, p: LossParts, lr: f64) -> EpochMetrics {
    EpochMetrics { epoch, split: split.into(), loss: p.loss, mse: p.mse, pearson: p.pearson, lr }
}

/// Self-supervised training: `epochs_population` epochs on the population
/// data, then early-stopped adaptation on the healthy clinical data with an
/// inner validation split. Returns the best validation checkpoint.
pub fn pretrain_ssl(
    model: GraphS4Model,
    population: &[Sample],
    clinical_healthy: &[Sample],
    spec: &TaskSpec,
    partition: &NetworkPartition,
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<SslOutcome> {
    cfg.validate()?;
    loss.validate()?;
    if population.is_empty() && cfg.epochs_population > 0 {
        return Err(invalid("population dataset is empty"));
    }
    if clinical_healthy.len() < 2 {
        return Err(invalid("clinical healthy dataset needs at least 2 samples"));
    }
    if let Some(s) = clinical_healthy.iter().find(|s| s.label != Label::Healthy) {
        return Err(invalid(format!("clinical healthy dataset contains non-healthy sample {}", s.id)));
    }
    let all: Vec<&Sample> = population.iter().chain(clinical_healthy).collect();
    let t = check_lengths(&all, &model)?;
    spec.validate(partition, t)?;
    let stage = SslStage { spec, partition, loss, cfg, t };
    let mut model = model;
    let mut opt = cfg.optimizer();
    let mut log = Vec::new();

    let pop: Vec<&Sample> = population.iter().collect();
    for epoch in 0..cfg.epochs_population {
        let p = stage.epoch(&mut model, &mut opt, &pop, epoch)?;
        log.push(metrics(epoch + 1, "population", p, cfg.lr_at(epoch)));
    }

    let clinical: Vec<&Sample> = clinical_healthy.iter().collect();
    let (train, val) = inner_split(&clinical, cfg.val_fraction, mix_seed(cfg.seed, 0x1a1));
    let initial = stage.evaluate(&model, &val)?;
    log.push(metrics(cfg.epochs_population, "clinical_val", initial, cfg.lr_at(cfg.epochs_population)));
    let mut best = (f64::INFINITY, model.clone());
    let mut since_best = 0;
    let mut clinical_epochs = 0;
    for k in 0..cfg.epochs_clinical_max {
        let epoch = cfg.epochs_population + k;
        let tr = stage.epoch(&mut model, &mut opt, &train, epoch)?;
        let va = stage.evaluate(&model, &val)?;
        log.push(metrics(epoch + 1, "clinical_train", tr, cfg.lr_at(epoch)));
        log.push(metrics(epoch + 1, "clinical_val", va, cfg.lr_at(epoch)));
        clinical_epochs += 1;
        if va.loss < best.0 {
            best = (va.loss, model.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    Ok(SslOutcome { model: best.1, log, initial_val_loss: initial.loss, best_val_loss: best.0, clinical_epochs })
}

/// Whether `name` stays fixed during partial fine-tuning.
pub fn is_frozen_for_finetune(name: &str, num_layers: usize) -> bool {
    let last = format!("layers.{}.", num_layers - 1);
    !(name.starts_with(&last) || name.starts_with("cls_head"))
}

/// Eval-mode class logits for every sample.
pub fn predict_cls(model: &GraphS4Model, samples: &[Sample]) -> Result<Vec<[f64; 2]>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let t = check_lengths(&refs, model)?;
    let prep = model.prepare(t, Mode::Conv)?;
    samples.par_iter().map(|s| Ok(model.forward_cls_with(&prep, &s.x, None)?.0)).collect()
}

/// Predicted class: 1 when the patient logit is larger.
pub fn argmax(logits: [f64; 2]) -> u8 {
    u8::from(logits[1] > logits[0])
}

/// Per-class seeded split, so both classes reach the inner validation set.
fn stratified_inner_split(data: &[(Array3<f64>, u8)], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..2u8 {
        let idx: Vec<usize> = (0..data.len()).filter(|&i| data[i].1 == class).collect();
        let (tr, va) = inner_split(&idx, fraction, mix_seed(seed, u64::from(class)));
        train.extend(tr);
        val.extend(va);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn balanced_accuracy(model: &GraphS4Model, prep: &Prepared, data: &[(Array3<f64>, u8)], idx: &[usize], start: usize) -> Result<(f64, f64)> {
    let out: Result<Vec<(u8, f64)>> = idx
        .par_iter()
        .map(|&i| {
            let (logits, _) = model.forward_cls_from(prep, data[i].0.clone(), start, None)?;
            Ok((argmax(logits), cross_entropy(logits, data[i].1).0))
        })
        .collect();
    let out = out?;
    let pred: Vec<u8> = out.iter().map(|o| o.0).collect();
    let labels: Vec<u8> = idx.iter().map(|&i| data[i].1).collect();
    let ce = out.iter().map(|o| o.1).sum::<f64>() / out.len() as f64;
    Ok((binary_metrics(&pred, &labels)?.balanced_accuracy, ce))
}

fn ce_metrics(epoch: usize, split: &str, loss: f64, lr: f64) -> EpochMetrics {
    EpochMetrics { epoch, split: split.into(), loss, mse: f64::NAN, pearson: f64::NAN, lr }
}

/// Supervised fine-tuning with cross-entropy on the two class logits.
/// Unless `full_finetune` is set, only the last layer and the head are
/// updated; the frozen prefix is evaluated once per sample in eval mode.
/// Early-stops on inner-validation balanced accuracy.
pub fn finetune_cls(model: GraphS4Model, labeled: &[Sample], cfg: &TrainConfig) -> Result<ClsOutcome> {
    cfg.validate()?;
    let mut classes = [0usize; 2];
    for s in labeled {
        match s.label.as_class() {
            Some(c) => classes[usize::from(c)] += 1,
            None => return Err(invalid(format!("sample {} is unlabeled", s.id))),
        }
    }
    if classes[0] < 2 || classes[1] < 2 {
        return Err(invalid("fine-tuning needs at least 2 samples of each class"));
    }
    let refs: Vec<&Sample> = labeled.iter().collect();
    let t = check_lengths(&refs, &model)?;
    let mut model = model;
    if model.cls_head.is_none() {
        model.init_cls_head(mix_seed(cfg.seed, 0xc15));
    }
    let num_layers = model.layers.len();
    let start = if cfg.full_finetune { 0 } else { num_layers - 1 };
    let frozen = move |name: &str| !cfg.full_finetune && is_frozen_for_finetune(name, num_layers);

    // Inputs to the first trainable layer.
    let prep = model.prepare(t, Mode::Conv)?;
    let data: Vec<(Array3<f64>, u8)> = labeled
        .par_iter()
        .map(|s| Ok((model.trunk_features(&prep, &s.x, start)?, s.label.as_class().expect("checked"))))
        .collect::<Result<_>>()?;
    let raw: Vec<&Array2<f64>> = labeled.iter().map(|s| &s.x).collect();
    let (train, val) = stratified_inner_split(&data, cfg.val_fraction, mix_seed(cfg.seed, 0x1a2));

    let mut opt = cfg.optimizer();
    let mut log = Vec::new();
    let mut best = (f64::NEG_INFINITY, model.clone());
    let mut since_best = 0;
    let mut epochs = 0;
    for epoch in 0..cfg.epochs_clinical_max {
        let lr = cfg.lr_at(epoch);
        let epoch_seed = mix_seed(cfg.seed, 0xf17 ^ epoch as u64);
        let mut losses = Vec::new();
        for batch in batches(train.len(), cfg.batch_size, epoch_seed) {
            let prep = model.prepare(t, Mode::Conv)?;
            let m: &GraphS4Model = &model;
            let results: Vec<Result<(f64, Gradients)>> = batch
                .par_iter()
                .map(|&b| {
                    let i = train[b];
                    let dropout = Some(mix_seed(epoch_seed, i as u64));
                    let (logits, cache) = if start == 0 {
                        m.forward_cls_with(&prep, raw[i], dropout)?
                    } else {
                        m.forward_cls_from(&prep, data[i].0.clone(), start, dropout)?
                    };
                    let (l, g) = cross_entropy(logits, data[i].1);
                    let mut grads = Gradients::new(m, &prep);
                    m.backward_cls(&prep, &cache, g, &mut grads)?;
                    Ok((l, grads))
                })
                .collect();
            let mut grads = Vec::with_capacity(results.len());
            for r in results {
                let (l, g) = r?;
                losses.push(l);
                grads.push(g);
            }
            let total = reduce(&model, &prep, grads)?;
            opt.step(&mut model, &total, lr, cfg.min_decay, &frozen);
        }
        let prep = model.prepare(t, Mode::Conv)?;
        let val_data: Vec<(Array3<f64>, u8)>;
        let (bacc, val_ce) = if start == 0 {
            val_data = val.iter().map(|&i| (model.trunk_features(&prep, raw[i], 0).expect("checked"), data[i].1)).collect();
            balanced_accuracy(&model, &prep, &val_data, &(0..val.len()).collect::<Vec<_>>(), 0)?
        } else {
            balanced_accuracy(&model, &prep, &data, &val, start)?
        };
        log.push(ce_metrics(epoch + 1, "train", losses.iter().sum::<f64>() / losses.len().max(1) as f64, lr));
        log.push(ce_metrics(epoch + 1, "val", val_ce, lr));
        epochs += 1;
        if bacc > best.0 {
            best = (bacc, model.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    Ok(ClsOutcome { model: best.1, log, best_val_balanced_accuracy: best.0, epochs })
}
