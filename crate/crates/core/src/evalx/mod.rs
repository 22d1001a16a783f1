//! Anomaly scores, screening reports, ranking metrics, threshold selection
//! and repeated stratified cross-validation.

mod cv;

pub use cv::{binary_metrics, cv_harness, cv_splits, CvFold, CvResult, Excluded, FoldMetrics};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Sample;
use crate::error::{invalid, Result};
use crate::model::{GraphS4Model, Mode};
use crate::tasks::{build_instance, eval_random_mask_score, NetworkPartition, TaskSpec};

/// Seed of the instance built for scoring stochastic tasks.
pub const SCORE_SEED: u64 = 0x5c0e;

/// Masked-region MSE of the model's prediction, in eval mode.
pub fn anomaly_score(model: &GraphS4Model, x: &Sample, spec: &TaskSpec, p: &NetworkPartition) -> Result<f64> {
    anomaly_scores(model, std::slice::from_ref(x), spec, p).map(|s| s[0])
}

/// [`anomaly_score`] for many samples of equal length.
pub fn anomaly_scores(model: &GraphS4Model, samples: &[Sample], spec: &TaskSpec, p: &NetworkPartition) -> Result<Vec<f64>> {
    let Some(first) = samples.first() else {
        return Ok(Vec::new());
    };
    let t = first.x.ncols();
    for s in samples {
        if s.x.dim() != (model.config.num_nodes, t) {
            return Err(invalid(format!(
                "sample {} has shape {:?}, model expects {} nodes and {t} timepoints",
                s.id,
                s.x.dim(),
                model.config.num_nodes
            )));
        }
    }
    if matches!(spec, TaskSpec::RandomMask { .. }) {
        return samples.par_iter().map(|s| eval_random_mask_score(model, &s.x, spec, SCORE_SEED)).collect();
    }
    let prep = model.prepare(t, Mode::Conv)?;
    samples
        .par_iter()
        .map(|s| {
            let inst = build_instance(&s.x, spec, p, SCORE_SEED)?;
            let pred = model.forward_seq_with(&prep, &inst.input, None)?.0;
            Ok(inst.masked_mse(&pred))
        })
        .collect()
}

fn check_binary(labels: &[u8]) -> Result<(usize, usize)> {
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(invalid(format!("labels must be 0 or 1, found {l}")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(invalid("both classes must be present"));
    }
    Ok((pos, neg))
}

/// Mann-Whitney estimate of P(score of a positive > score of a negative),
/// ties counted one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid("scores contain NaN"));
    }
    let (pos, neg) = check_binary(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of average ranks (1-based) of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Chosen operating point: samples scoring at or above `threshold` are
/// called positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub threshold: f64,
    pub youden_j: f64,
    /// Set when no threshold beats chance (`J <= 0`).
    pub warning: bool,
}

/// Threshold maximizing Youden's J. Candidates are the lowest score and the
/// midpoints between consecutive distinct scores; ties go to the lowest.
pub fn select_threshold(scores: &[f64], labels: &[u8]) -> Result<Threshold> {
    if scores.len() != labels.len() {
        return Err(invalid("scores and labels differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(invalid("scores must be finite"));
    }
    let (pos, neg) = check_binary(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Everything positive at the lowest score: sensitivity 1, specificity 0.
    let mut best = (scores[order[0]], 0.0);
    let (mut tn, mut fn_) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                fn_ += 1;
            } else {
                tn += 1;
            }
            i += 1;
        }
        if i == order.len() {
            break;
        }
        let sens = (pos - fn_) as f64 / pos as f64;
        let spec = tn as f64 / neg as f64;
        let j = sens + spec - 1.0;
        if j > best.1 {
            best = ((s + scores[order[i]]) / 2.0, j);
        }
    }
    Ok(Threshold { threshold: best.0, youden_j: best.1, warning: best.1 <= 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenRow {
    pub mse_healthy: f64,
    pub mse_patient: f64,
    pub auroc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenReport {
    pub rows: BTreeMap<String, ScreenRow>,
    pub dataset_id: String,
}

impl ScreenReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Row name with the highest AUROC.
    pub fn best(&self) -> Option<&str> {
        self.rows.iter().max_by(|a, b| a.1.auroc.total_cmp(&b.1.auroc)).map(|(k, _)| k.as_str())
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.keys().map(String::len).max().unwrap_or(4).max(4);
        let mut out = format!("dataset: {}\n", self.dataset_id);
        let _ = writeln!(out, "{:<width$}  {:>12}  {:>12}  {:>7}", "task", "MSE healthy", "MSE patient", "AUROC");
        for (name, r) in &self.rows {
            let _ = writeln!(out, "{:<width$}  {:>12.4}  {:>12.4}  {:>7.3}", name, r.mse_healthy, r.mse_patient, r.auroc);
        }
        out
    }
}

fn labels_of(val: &[Sample]) -> Result<Vec<u8>> {
    val.iter()
        .map(|s| s.label.as_class().ok_or_else(|| invalid(format!("validation sample {} is unlabeled", s.id))))
        .collect()
}

/// Rejects validation sets that lack a class or whose class counts differ
/// by more than 10% of the set size.
pub fn check_balanced(val: &[Sample]) -> Result<()> {
    let labels = labels_of(val)?;
    let (pos, neg) = check_binary(&labels).map_err(|_| invalid("validation set must contain healthy and patient samples"))?;
    if pos.abs_diff(neg) as f64 > 0.1 * labels.len() as f64 {
        return Err(invalid(format!("validation set is unbalanced: {neg} healthy, {pos} patients")));
    }
    Ok(())
}

/// Mean scores per class and the AUROC for one task.
pub fn screen_task(model: &GraphS4Model, val: &[Sample], spec: &TaskSpec, p: &NetworkPartition) -> Result<ScreenRow> {
    let labels = labels_of(val)?;
    let scores = anomaly_scores(model, val, spec, p)?;
    let mean = |class: u8| {
        let v: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &l)| l == class).map(|(s, _)| *s).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    Ok(ScreenRow { mse_healthy: mean(0), mse_patient: mean(1), auroc: auroc(&scores, &labels)? })
}

/// One row per `(spec, model)` pair, named by the task.
pub fn screen_tasks(models: &[(TaskSpec, GraphS4Model)], val: &[Sample], p: &NetworkPartition, dataset_id: &str) -> Result<ScreenReport> {
    check_balanced(val)?;
    let mut rows = BTreeMap::new();
    for (spec, model) in models {
        rows.insert(spec.name(), screen_task(model, val, spec, p)?);
    }
    Ok(ScreenReport { rows, dataset_id: dataset_id.into() })
}

/// Network-masking screen: one model per partition network.
pub fn screen_networks(models: &BTreeMap<String, GraphS4Model>, val: &[Sample], p: &NetworkPartition, dataset_id: &str) -> Result<ScreenReport> {
    let mut pairs = Vec::new();
    for name in p.networks.keys() {
        let model = models.get(name).ok_or_else(|| invalid(format!("no model for network {name:?}")))?;
        pairs.push((TaskSpec::NetworkMask { target_network: name.clone() }, model.clone()));
    }
    if let Some(extra) = models.keys().find(|k| !p.networks.contains_key(*k)) {
        return Err(invalid(format!("model {extra:?} matches no partition network")));
    }
    screen_tasks(&pairs, val, p, dataset_id)
}

/// Labels of a sample set, with healthy as 0.
pub fn class_labels(samples: &[Sample]) -> Result<Vec<u8>> {
    labels_of(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_worked_examples() {
        assert!((auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert!(auroc(&[0.3, 0.4], &[1, 1]).is_err());
    }

    #[test]
    fn threshold_examples() {
        let t = select_threshold(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap();
        assert_eq!(t.threshold, 0.5);
        assert_eq!(t.youden_j, 1.0);
        assert!(!t.warning);
        let t = select_threshold(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 0]).unwrap();
        assert!(t.youden_j <= 0.0 && t.warning);
        let t = select_threshold(&[0.7; 4], &[0, 1, 0, 1]).unwrap();
        assert_eq!((t.threshold, t.youden_j), (0.7, 0.0));
    }

    #[test]
    fn threshold_ties_prefer_lower() {
        // cuts at 0.15 and 0.85 both give J = 0.5
        let t = select_threshold(&[0.1, 0.2, 0.8, 0.9], &[0, 1, 0, 1]).unwrap();
        assert!((t.youden_j - 0.5).abs() < 1e-12);
        assert!((t.threshold - 0.15).abs() < 1e-12);
    }
}
