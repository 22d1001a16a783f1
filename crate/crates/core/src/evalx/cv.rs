use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Sample;
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub balanced_accuracy: f64,
    /// Recall of patients (class 1).
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Metrics of hard predictions with patients as the positive class.
pub fn binary_metrics(pred: &[u8], labels: &[u8]) -> Result<FoldMetrics> {
    if pred.len() != labels.len() {
        return Err(invalid("predictions and labels differ in length"));
    }
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in pred.iter().zip(labels) {
        match (l, p) {
            (1, 1) => tp += 1,
            (1, _) => fn_ += 1,
            (_, 1) => fp += 1,
            _ => tn += 1,
        }
    }
    if tp + fn_ == 0 || tn + fp == 0 {
        return Err(invalid("both classes must be present"));
    }
    let sensitivity = tp as f64 / (tp + fn_) as f64;
    let specificity = tn as f64 / (tn + fp) as f64;
    Ok(FoldMetrics { balanced_accuracy: (sensitivity + specificity) / 2.0, sensitivity, specificity })
}

/// Sample ids kept out of cross-validation test folds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Excluded {
    /// Never used at all.
    pub ss_val: BTreeSet<String>,
    /// Used for training only.
    pub ss_train: BTreeSet<String>,
}

/// Indices into the dataset for one fold of one repeat.
#[derive(Clone, Debug, PartialEq)]
pub struct CvFold {
    pub repeat: usize,
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified folds. Test folds partition the samples outside both excluded
/// sets; training sets also contain every `ss_train` sample.
pub fn cv_splits(dataset: &[Sample], folds: usize, repeats: usize, excluded: &Excluded, seed: u64) -> Result<Vec<CvFold>> {
    if folds < 2 || repeats == 0 {
        return Err(invalid("cross-validation needs at least 2 folds and 1 repeat"));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    let mut train_only = Vec::new();
    for (i, s) in dataset.iter().enumerate() {
        if excluded.ss_val.contains(&s.id) {
            continue;
        }
        if excluded.ss_train.contains(&s.id) {
            train_only.push(i);
            continue;
        }
        let class = s.label.as_class().ok_or_else(|| invalid(format!("sample {} is unlabeled", s.id)))?;
        by_class[usize::from(class)].push(i);
    }
    if by_class.iter().any(|c| c.len() < folds) {
        return Err(invalid(format!(
            "every fold needs both classes: {} healthy and {} patients for {folds} folds",
            by_class[0].len(),
            by_class[1].len()
        )));
    }
    let mut out = Vec::with_capacity(folds * repeats);
    for repeat in 0..repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(repeat as u64));
        let mut assign: Vec<Vec<usize>> = vec![Vec::new(); folds];
        let mut offset = 0;
        for class in &by_class {
            let mut idx = class.clone();
            idx.shuffle(&mut rng);
            for (k, i) in idx.into_iter().enumerate() {
                assign[(offset + k) % folds].push(i);
            }
            offset += class.len();
        }
        for (fold, test) in assign.iter().enumerate() {
            let mut test = test.clone();
            test.sort_unstable();
            let mut train: Vec<usize> = assign.iter().enumerate().filter(|(f, _)| *f != fold).flat_map(|(_, v)| v.iter().copied()).collect();
            train.extend(&train_only);
            train.sort_unstable();
            out.push(CvFold { repeat, fold, train, test });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub per_fold: Vec<FoldMetrics>,
    pub mean: FoldMetrics,
    /// Sample standard deviation over folds.
    pub std: FoldMetrics,
    pub repeats: usize,
    pub folds: usize,
}

fn summarize(per_fold: &[FoldMetrics]) -> (FoldMetrics, FoldMetrics) {
    let n = per_fold.len() as f64;
    let get: [fn(&FoldMetrics) -> f64; 3] = [|m| m.balanced_accuracy, |m| m.sensitivity, |m| m.specificity];
    let stat = |f: fn(&FoldMetrics) -> f64| {
        let mean = per_fold.iter().map(f).sum::<f64>() / n;
        let var = if per_fold.len() > 1 { per_fold.iter().map(|m| (f(m) - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        (mean, var.sqrt())
    };
    let [a, b, c] = get.map(stat);
    (
        FoldMetrics { balanced_accuracy: a.0, sensitivity: b.0, specificity: c.0 },
        FoldMetrics { balanced_accuracy: a.1, sensitivity: b.1, specificity: c.1 },
    )
}

impl CvResult {
    pub fn from_folds(per_fold: Vec<FoldMetrics>, repeats: usize, folds: usize) -> Self {
        let (mean, std) = summarize(&per_fold);
        Self { per_fold, mean, std, repeats, folds }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{} x {}-fold cross-validation\n", self.repeats, self.folds);
        let _ = writeln!(out, "{:<18}  {:>7}  {:>7}", "metric", "mean", "std");
        for (name, m, s) in [
            ("balanced accuracy", self.mean.balanced_accuracy, self.std.balanced_accuracy),
            ("sensitivity", self.mean.sensitivity, self.std.sensitivity),
            ("specificity", self.mean.specificity, self.std.specificity),
        ] {
            let _ = writeln!(out, "{name:<18}  {m:>7.4}  {s:>7.4}");
        }
        out
    }
}

/// Repeated stratified cross-validation. `train_fn` receives the training
/// and test samples of a fold plus a fold seed, and returns hard test
/// predictions (1 for patient).
pub fn cv_harness(
    dataset: &[Sample],
    folds: usize,
    repeats: usize,
    excluded: &Excluded,
    train_fn: &mut dyn FnMut(&[Sample], &[Sample], u64) -> Result<Vec<u8>>,
    seed: u64,
) -> Result<CvResult> {
    let splits = cv_splits(dataset, folds, repeats, excluded, seed)?;
    let mut per_fold = Vec::with_capacity(splits.len());
    for split in &splits {
        let train: Vec<Sample> = split.train.iter().map(|&i| dataset[i].clone()).collect();
        let test: Vec<Sample> = split.test.iter().map(|&i| dataset[i].clone()).collect();
        let fold_seed = seed ^ ((split.repeat * folds + split.fold) as u64).wrapping_mul(0x2545_f491_4f6c_dd1d);
        let pred = train_fn(&train, &test, fold_seed)?;
        if pred.len() != test.len() {
            return Err(invalid("train_fn returned the wrong number of predictions"));
        }
        let labels: Vec<u8> = test.iter().map(|s| s.label.as_class().expect("checked by cv_splits")).collect();
        per_fold.push(binary_metrics(&pred, &labels)?);
    }
    Ok(CvResult::from_folds(per_fold, repeats, folds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_of_majority_predictor() {
        let m = binary_metrics(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap();
        assert_eq!((m.balanced_accuracy, m.sensitivity, m.specificity), (0.5, 0.0, 1.0));
        assert!(binary_metrics(&[0, 1], &[1, 1]).is_err());
    }

    #[test]
    fn summary_uses_sample_std() {
        let f = |b| FoldMetrics { balanced_accuracy: b, sensitivity: b, specificity: b };
        let r = CvResult::from_folds(vec![f(0.5), f(0.7)], 1, 2);
        assert!((r.mean.balanced_accuracy - 0.6).abs() < 1e-15);
        assert!((r.std.balanced_accuracy - 0.02f64.sqrt()).abs() < 1e-12);
    }
}
