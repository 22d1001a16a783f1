//! Samples and datasets, per-node standardization, timecourse resampling,
//! file formats and the synthetic VAR(1) generator.

mod io;
mod synth;

pub use io::{
    load_dataset, load_matrix, read_matrix_binary, read_matrix_csv, save_dataset, save_matrix, write_matrix_binary,
    write_matrix_csv, Manifest, ManifestEntry, MatrixFormat, MATRIX_MAGIC, MATRIX_VERSION,
};
pub use synth::{generate_synth, network_names, perturbed_transition, transition_matrix, SplitCounts, SynthConfig};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Floor on the standard deviation used by [`standardize`].
pub const STD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Healthy,
    Patient,
    Unlabeled,
}

impl Label {
    /// `0` for healthy, `1` for patient.
    pub fn as_class(self) -> Option<u8> {
        match self {
            Label::Healthy => Some(0),
            Label::Patient => Some(1),
            Label::Unlabeled => None,
        }
    }

    pub fn from_class(c: u8) -> Self {
        if c == 0 {
            Label::Healthy
        } else {
            Label::Patient
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Population,
    ClinicalSsTrain,
    ClinicalSsVal,
    ClinicalCv,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Population, Split::ClinicalSsTrain, Split::ClinicalSsVal, Split::ClinicalCv];

    pub fn name(self) -> &'static str {
        match self {
            Split::Population => "population",
            Split::ClinicalSsTrain => "clinical_ss_train",
            Split::ClinicalSsVal => "clinical_ss_val",
            Split::ClinicalCv => "clinical_cv",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.name() == s)
    }
}

/// One subject: a `V x T` signal matrix with metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub x: Array2<f64>,
    pub label: Label,
    pub site: String,
    pub split: Split,
}

/// Samples of one split, in order.
pub fn by_split(samples: &[Sample], split: Split) -> Vec<Sample> {
    samples.iter().filter(|s| s.split == split).cloned().collect()
}

/// Zero mean and unit (population) standard deviation per node row. Rows
/// with a standard deviation below [`STD_EPS`] map to zeros.
pub fn standardize(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let sd = (row.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        if sd < STD_EPS {
            row.fill(0.0);
        } else {
            row.mapv_inplace(|v| v / sd);
        }
    }
    out
}

/// Per-node linear interpolation onto `t_new` uniformly spaced points with
/// the endpoints mapped to the endpoints.
pub fn resample_linear(x: &Array2<f64>, t_new: usize) -> Result<Array2<f64>> {
    let (v, t) = x.dim();
    if t < 2 {
        return Err(invalid("resampling needs at least 2 timepoints"));
    }
    if t_new < 2 {
        return Err(invalid(format!("target length {t_new} is below 2")));
    }
    if t_new == t {
        return Ok(x.clone());
    }
    let step = (t - 1) as f64 / (t_new - 1) as f64;
    let mut out = Array2::zeros((v, t_new));
    for j in 0..t_new {
        let pos = j as f64 * step;
        let i0 = (pos.floor() as usize).min(t - 2);
        let frac = pos - i0 as f64;
        for r in 0..v {
            out[(r, j)] = x[(r, i0)] * (1.0 - frac) + x[(r, i0 + 1)] * frac;
        }
    }
    for r in 0..v {
        out[(r, t_new - 1)] = x[(r, t - 1)];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn standardize_examples() {
        let z = standardize(&array![[1.0, 2.0, 3.0], [5.0, 5.0, 5.0]]);
        let row = z.row(0);
        assert!(row.sum().abs() < 1e-15);
        assert!(((row.iter().map(|v| v * v).sum::<f64>() / 3.0).sqrt() - 1.0).abs() < 1e-15);
        assert!(z.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardize_is_idempotent() {
        let x = Array2::from_shape_fn((3, 50), |(i, j)| ((i * 31 + j * 17) as f64).sin() * 1e3 + i as f64);
        let a = standardize(&x);
        let b = standardize(&a);
        assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn resample_examples() {
        let r = resample_linear(&array![[0.0, 1.0]], 3).unwrap();
        assert_eq!(r, array![[0.0, 0.5, 1.0]]);
        let x = array![[1.0, 4.0, -2.0, 0.5]];
        assert_eq!(resample_linear(&x, 4).unwrap(), x);
        for t_new in [2, 5, 9, 100] {
            let r = resample_linear(&x, t_new).unwrap();
            assert_eq!(r[(0, 0)], 1.0);
            assert_eq!(r[(0, t_new - 1)], 0.5);
        }
        assert!(resample_linear(&x, 1).is_err());
    }

    #[test]
    fn split_names_round_trip() {
        for s in Split::ALL {
            assert_eq!(Split::parse(s.name()), Some(s));
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
        assert_eq!(Split::parse("train"), None);
    }
}
