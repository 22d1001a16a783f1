//! Self-supervised tasks: masked-network prediction, forecasting, denoising
//! and random node masks, each turning a signal matrix into an
//! `(input, target, loss_mask)` triple.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{GraphS4Model, Mode};

/// Assignment of nodes to named networks, optionally with fractional
/// overlaps (`V x K`, columns in network-name order).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkPartition {
    pub num_nodes: usize,
    pub networks: BTreeMap<String, Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlaps: Option<Vec<Vec<f64>>>,
}

impl NetworkPartition {
    pub fn new(num_nodes: usize, networks: BTreeMap<String, Vec<usize>>, overlaps: Option<Vec<Vec<f64>>>) -> Result<Self> {
        let p = Self { num_nodes, networks, overlaps };
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 || self.networks.is_empty() {
            return Err(invalid("partition needs at least one node and one network"));
        }
        for (name, idx) in &self.networks {
            if let Some(&bad) = idx.iter().find(|&&i| i >= self.num_nodes) {
                return Err(invalid(format!("network {name:?} lists node {bad} outside 0..{}", self.num_nodes)));
            }
        }
        match &self.overlaps {
            None => {
                let mut owner = vec![None; self.num_nodes];
                for (name, idx) in &self.networks {
                    for &i in idx {
                        if let Some(prev) = owner[i].replace(name) {
                            return Err(invalid(format!("node {i} belongs to both {prev:?} and {name:?}")));
                        }
                    }
                }
                if let Some(i) = owner.iter().position(Option::is_none) {
                    return Err(invalid(format!("node {i} belongs to no network")));
                }
            }
            Some(rows) => {
                if rows.len() != self.num_nodes || rows.iter().any(|r| r.len() != self.networks.len()) {
                    return Err(invalid("overlaps must be num_nodes x num_networks"));
                }
                for (i, r) in rows.iter().enumerate() {
                    if r.iter().any(|v| !(0.0..=1.0).contains(v)) {
                        return Err(invalid(format!("overlap row {i} has entries outside [0, 1]")));
                    }
                    if r.iter().sum::<f64>() > 1.0 + 1e-6 {
                        return Err(invalid(format!("overlap row {i} sums above 1")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.networks.keys().cloned().collect()
    }
}

/// Node mask of one network: membership, or overlap fraction of at least 0.5.
pub fn make_network_mask(p: &NetworkPartition, network: &str) -> Result<Vec<bool>> {
    let col = p
        .networks
        .keys()
        .position(|k| k == network)
        .ok_or_else(|| invalid(format!("unknown network {network:?}")))?;
    Ok(match &p.overlaps {
        Some(rows) => rows.iter().map(|r| r[col] >= 0.5).collect(),
        None => {
            let mut m = vec![false; p.num_nodes];
            for &i in &p.networks[network] {
                m[i] = true;
            }
            m
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    NetworkMask { target_network: String },
    Forecast { horizon: usize },
    Denoise { noise_sigma: f64 },
    RandomMask { mask_fraction: f64, num_eval_masks: usize },
}

impl TaskSpec {
    /// Short name used for checkpoints and reports.
    pub fn name(&self) -> String {
        match self {
            TaskSpec::NetworkMask { target_network } => target_network.clone(),
            TaskSpec::Forecast { horizon } => format!("forecast-{horizon}"),
            TaskSpec::Denoise { .. } => "denoise".into(),
            TaskSpec::RandomMask { .. } => "random-mask".into(),
        }
    }

    /// True when instances depend on the seed.
    pub fn is_stochastic(&self) -> bool {
        matches!(self, TaskSpec::Denoise { .. } | TaskSpec::RandomMask { .. })
    }

    pub fn validate(&self, p: &NetworkPartition, timepoints: usize) -> Result<()> {
        match self {
            TaskSpec::NetworkMask { target_network } => {
                if !make_network_mask(p, target_network)?.contains(&true) {
                    return Err(invalid(format!("network {target_network:?} masks no node")));
                }
            }
            TaskSpec::Forecast { horizon } => {
                if *horizon == 0 || *horizon >= timepoints {
                    return Err(invalid(format!("forecast horizon {horizon} must lie in 1..{timepoints}")));
                }
            }
            TaskSpec::Denoise { noise_sigma } => {
                if !noise_sigma.is_finite() || *noise_sigma < 0.0 {
                    return Err(invalid("noise_sigma must be finite and non-negative"));
                }
            }
            TaskSpec::RandomMask { mask_fraction, num_eval_masks } => {
                if !(*mask_fraction > 0.0 && *mask_fraction < 1.0) {
                    return Err(invalid("mask_fraction must lie in (0, 1)"));
                }
                if *num_eval_masks == 0 {
                    return Err(invalid("num_eval_masks must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskInstance {
    pub input: Array2<f64>,
    pub target: Array2<f64>,
    pub loss_mask: Array2<bool>,
}

impl TaskInstance {
    /// Mean squared error of `pred` over the loss-mask positions.
    pub fn masked_mse(&self, pred: &Array2<f64>) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for ((p, t), &m) in pred.iter().zip(&self.target).zip(&self.loss_mask) {
            if m {
                sum += (p - t) * (p - t);
                n += 1;
            }
        }
        sum / n as f64
    }
}

fn hide_rows(x: &Array2<f64>, rows: &[bool]) -> (Array2<f64>, Array2<bool>) {
    let mut input = x.clone();
    let mut mask = Array2::from_elem(x.dim(), false);
    for (i, &hidden) in rows.iter().enumerate() {
        if hidden {
            input.row_mut(i).fill(0.0);
            mask.row_mut(i).fill(true);
        }
    }
    (input, mask)
}

pub fn build_instance(x: &Array2<f64>, spec: &TaskSpec, p: &NetworkPartition, seed: u64) -> Result<TaskInstance> {
    let (v, t) = x.dim();
    if v != p.num_nodes {
        return Err(invalid(format!("sample has {v} nodes, partition has {}", p.num_nodes)));
    }
    spec.validate(p, t)?;
    let (input, loss_mask) = match spec {
        TaskSpec::NetworkMask { target_network } => hide_rows(x, &make_network_mask(p, target_network)?),
        TaskSpec::Forecast { horizon } => {
            let mut input = x.clone();
            let mut mask = Array2::from_elem((v, t), false);
            input.slice_mut(ndarray::s![.., t - horizon..]).fill(0.0);
            mask.slice_mut(ndarray::s![.., t - horizon..]).fill(true);
            (input, mask)
        }
        TaskSpec::Denoise { noise_sigma } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut input = x.clone();
            if *noise_sigma > 0.0 {
                for val in input.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *val += noise_sigma * e;
                }
            }
            (input, Array2::from_elem((v, t), true))
        }
        TaskSpec::RandomMask { mask_fraction, .. } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = ((mask_fraction * v as f64).round() as usize).clamp(1, v);
            let mut order: Vec<usize> = (0..v).collect();
            order.shuffle(&mut rng);
            let mut rows = vec![false; v];
            for &i in &order[..k] {
                rows[i] = true;
            }
            hide_rows(x, &rows)
        }
    };
    Ok(TaskInstance { input, target: x.clone(), loss_mask })
}

/// Rows of the loss mask with at least one masked position.
pub fn masked_rows(mask: &Array2<bool>) -> Vec<usize> {
    mask.axis_iter(Axis(0)).enumerate().filter(|(_, r)| r.iter().any(|&m| m)).map(|(i, _)| i).collect()
}

/// Mean masked-region MSE over `num_eval_masks` seeded random masks.
pub fn eval_random_mask_score(model: &GraphS4Model, x: &Array2<f64>, spec: &TaskSpec, seed: u64) -> Result<f64> {
    let TaskSpec::RandomMask { num_eval_masks, .. } = spec else {
        return Err(invalid("random-mask scoring needs a random_mask task"));
    };
    let p = trivial_partition(x.nrows());
    let prep = model.prepare(x.ncols(), Mode::Conv)?;
    let mut total = 0.0;
    for i in 0..*num_eval_masks {
        let inst = build_instance(x, spec, &p, seed.wrapping_add(i as u64))?;
        let pred = model.forward_seq_with(&prep, &inst.input, None)?.0;
        total += inst.masked_mse(&pred);
    }
    Ok(total / *num_eval_masks as f64)
}

/// One network holding every node; enough for tasks that ignore networks.
pub fn trivial_partition(num_nodes: usize) -> NetworkPartition {
    let mut networks = BTreeMap::new();
    networks.insert("all".to_string(), (0..num_nodes).collect());
    NetworkPartition { num_nodes, networks, overlaps: None }
}
