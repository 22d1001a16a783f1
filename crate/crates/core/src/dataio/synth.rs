//! Synthetic networked time series: a stable VAR(1) process with a block
//! (network) coupling structure, and patients whose anomalous network is
//! partly decoupled from the rest.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Label, Sample, Split};
use crate::error::{invalid, Result};
use crate::tasks::NetworkPartition;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitCounts {
    pub population: usize,
    pub clinical_ss_train: usize,
    /// Half patients, half healthy.
    pub clinical_ss_val: usize,
    /// Half patients, half healthy.
    pub clinical_cv: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self { population: 400, clinical_ss_train: 100, clinical_ss_val: 200, clinical_cv: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_nodes: usize,
    pub num_networks: usize,
    pub timepoints: usize,
    pub within_coupling: f64,
    pub between_coupling: f64,
    pub noise_sigma: f64,
    pub anomaly_network: String,
    /// Fraction of the anomalous network's inbound between-network coupling
    /// removed in patients (clamped to 1).
    pub anomaly_strength: f64,
    pub counts: SplitCounts,
    pub seed: u64,
    /// Spectral radius of the healthy transition matrix.
    pub spectral_gain: f64,
    pub burn_in: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_nodes: 32,
            num_networks: 4,
            timepoints: 256,
            within_coupling: 1.0,
            between_coupling: 1.0,
            noise_sigma: 1.0,
            anomaly_network: "A".into(),
            anomaly_strength: 1.0,
            counts: SplitCounts::default(),
            seed: 0,
            spectral_gain: 0.5,
            burn_in: 100,
        }
    }
}

/// Network names `A, B, C, ...`.
pub fn network_names(num_networks: usize) -> Vec<String> {
    (0..num_networks).map(|i| char::from(b'A' + i as u8).to_string()).collect()
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_networks == 0 || self.num_networks > 26 {
            return Err(invalid("synth.num_networks must be in 1..=26"));
        }
        if self.num_nodes < self.num_networks {
            return Err(invalid("synth.num_nodes must be at least synth.num_networks"));
        }
        if self.timepoints < 2 {
            return Err(invalid("synth.timepoints must be at least 2"));
        }
        for (name, v) in [
            ("within_coupling", self.within_coupling),
            ("between_coupling", self.between_coupling),
            ("noise_sigma", self.noise_sigma),
            ("anomaly_strength", self.anomaly_strength),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(format!("synth.{name} must be finite and non-negative")));
            }
        }
        if self.within_coupling == 0.0 && self.between_coupling == 0.0 {
            return Err(invalid("synth couplings cannot both be zero"));
        }
        if !(self.spectral_gain > 0.0 && self.spectral_gain < 1.0) {
            return Err(invalid("synth.spectral_gain must lie in (0, 1) for a stable process"));
        }
        if !network_names(self.num_networks).contains(&self.anomaly_network) {
            return Err(invalid(format!("synth.anomaly_network {:?} is not a generated network", self.anomaly_network)));
        }
        Ok(())
    }

    /// Network index of every node: contiguous blocks, earlier networks
    /// taking the remainder.
    pub fn blocks(&self) -> Vec<usize> {
        let (v, g) = (self.num_nodes, self.num_networks);
        let mut out = Vec::with_capacity(v);
        for net in 0..g {
            let size = v / g + usize::from(net < v % g);
            out.extend(std::iter::repeat_n(net, size));
        }
        out
    }

    pub fn partition(&self) -> Result<NetworkPartition> {
        self.validate()?;
        let names = network_names(self.num_networks);
        let blocks = self.blocks();
        let networks = names
            .iter()
            .enumerate()
            .map(|(g, name)| (name.clone(), (0..self.num_nodes).filter(|&i| blocks[i] == g).collect()))
            .collect();
        NetworkPartition::new(self.num_nodes, networks, None)
    }

    fn anomaly_index(&self) -> usize {
        network_names(self.num_networks).iter().position(|n| *n == self.anomaly_network).expect("validated")
    }
}

fn spectral_radius(phi: &Array2<f64>) -> f64 {
    let v = phi.nrows();
    let m = nalgebra::DMatrix::from_fn(v, v, |i, j| phi[(i, j)]);
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Healthy transition matrix: signed Gaussian draws scaled by
/// `within_coupling` inside a network and `between_coupling` across networks,
/// then scaled as a whole to spectral radius `spectral_gain`.
pub fn transition_matrix(cfg: &SynthConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let v = cfg.num_nodes;
    let blocks = cfg.blocks();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut phi = Array2::<f64>::zeros((v, v));
    for i in 0..v {
        for j in 0..v {
            let z: f64 = StandardNormal.sample(&mut rng);
            phi[(i, j)] = z * if blocks[i] == blocks[j] { cfg.within_coupling } else { cfg.between_coupling };
        }
    }
    let rho = spectral_radius(&phi);
    if rho == 0.0 {
        return Err(invalid("synthetic transition matrix is nilpotent; raise within_coupling"));
    }
    phi.mapv_inplace(|x| x * cfg.spectral_gain / rho);
    check_stable(&phi)?;
    Ok(phi)
}

/// Patient transition matrix: the anomalous network's rows keep a fraction
/// `1 - anomaly_strength` of their between-network coupling.
pub fn perturbed_transition(phi: &Array2<f64>, cfg: &SynthConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    if cfg.anomaly_strength == 0.0 {
        return Ok(phi.clone());
    }
    let blocks = cfg.blocks();
    let target = cfg.anomaly_index();
    let factor = (1.0 - cfg.anomaly_strength).max(0.0);
    let mut out = phi.clone();
    for r in (0..cfg.num_nodes).filter(|&r| blocks[r] == target) {
        for c in (0..cfg.num_nodes).filter(|&c| blocks[c] != target) {
            out[(r, c)] *= factor;
        }
    }
    check_stable(&out)?;
    Ok(out)
}

fn check_stable(phi: &Array2<f64>) -> Result<()> {
    let rho = spectral_radius(phi);
    if rho >= 1.0 {
        return Err(invalid(format!("synthetic transition matrix is unstable (spectral radius {rho:.4})")));
    }
    Ok(())
}

fn simulate(phi: &Array2<f64>, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let v = cfg.num_nodes;
    let mut x = Array1::<f64>::zeros(v);
    let mut out = Array2::zeros((v, cfg.timepoints));
    for step in 0..cfg.burn_in + cfg.timepoints {
        let mut next = phi.dot(&x);
        for n in next.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *n += cfg.noise_sigma * e;
        }
        x = next;
        if step >= cfg.burn_in {
            out.column_mut(step - cfg.burn_in).assign(&x);
        }
    }
    out
}

/// Generates every split. Sample `i` (global index in split order) draws
/// from its own stream seeded with `seed ^ i`; values are raw, not standardized.
pub fn generate_synth(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    let healthy = transition_matrix(cfg)?;
    let patient = perturbed_transition(&healthy, cfg)?;
    let c = &cfg.counts;
    let mut plan: Vec<(Split, Label, usize)> = Vec::new();
    for i in 0..c.population {
        plan.push((Split::Population, Label::Healthy, i));
    }
    for i in 0..c.clinical_ss_train {
        plan.push((Split::ClinicalSsTrain, Label::Healthy, i));
    }
    for (split, n) in [(Split::ClinicalSsVal, c.clinical_ss_val), (Split::ClinicalCv, c.clinical_cv)] {
        let patients = n / 2;
        for i in 0..n {
            let label = if i < n - patients { Label::Healthy } else { Label::Patient };
            plan.push((split, label, i));
        }
    }
    let samples = plan
        .par_iter()
        .enumerate()
        .map(|(idx, &(split, label, i))| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ idx as u64);
            rng.set_stream(1);
            let phi = if label == Label::Patient { &patient } else { &healthy };
            Sample {
                id: format!("{}-{i:04}", split.name()),
                x: simulate(phi, cfg, &mut rng),
                label,
                site: "synth".into(),
                split,
            }
        })
        .collect();
    Ok(samples)
}
