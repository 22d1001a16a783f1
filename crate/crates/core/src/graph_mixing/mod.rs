//! Adaptive adjacency from node embeddings (ReLU + row-wise sparsemax) and
//! diffusion-convolution feature mixing across graph nodes.
//!
//! Feature tensors use the `(node, channel, time)` axis order throughout the
//! crate so every node-channel sequence is contiguous in memory.

mod diffusion;
mod sparsemax;

pub use diffusion::{diffusion_backward, diffusion_conv, diffusion_forward, DiffusionCache, DiffusionGrads, DiffusionMode};
pub use sparsemax::{sparsemax_backward, sparsemax_row};


use ndarray::Array2;

use crate::error::{invalid, Result};

/// Learnable node embedding dictionary `E_a` of shape `V x C_emb`.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeEmbedding(pub Array2<f64>);

impl NodeEmbedding {
    pub fn new(e_a: Array2<f64>) -> Result<Self> {
        if e_a.nrows() == 0 || e_a.ncols() == 0 {
            return Err(invalid("node embedding must be at least 1 x 1"));
        }
        if e_a.iter().any(|v| !v.is_finite()) {
            return Err(invalid("node embedding has non-finite entries"));
        }
        Ok(Self(e_a))
    }

    pub fn num_nodes(&self) -> usize {
        self.0.nrows()
    }
}

/// `E = I + S` where each row of `S` lies on the probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyMatrix(pub Array2<f64>);

impl AdjacencyMatrix {
    pub fn num_nodes(&self) -> usize {
        self.0.nrows()
    }

    /// Checks the structural invariants within `tol`.
    pub fn check_invariants(&self, tol: f64) -> bool {
        let v = self.num_nodes();
        (0..v).all(|i| {
            let row = self.0.row(i);
            let off: f64 = row.sum() - 1.0;
            row.iter().all(|&x| x >= -tol) && row[i] >= 1.0 - tol && (off - 1.0).abs() <= tol
        })
    }
}

/// Diffusion weights `W_0..W_D`, each `C_in x C_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionWeights(pub Vec<Array2<f64>>);

impl DiffusionWeights {
    pub fn steps(&self) -> usize {
        self.0.len().saturating_sub(1)
    }
}

/// `E = I_V + sparsemax_rows(ReLU(E_a E_a^T))`.
pub fn adaptive_adjacency(emb: &NodeEmbedding) -> AdjacencyMatrix {
    let e_a = &emb.0;
    let v = e_a.nrows();
    let sim = e_a.dot(&e_a.t()).mapv(|x| x.max(0.0));
    let mut e = Array2::<f64>::eye(v);
    for i in 0..v {
        let row: Vec<f64> = sim.row(i).to_vec();
        let p = sparsemax_row(&row);
        for (j, pj) in p.into_iter().enumerate() {
            e[(i, j)] += pj;
        }
    }
    AdjacencyMatrix(e)
}

/// Gradient of a loss with respect to `E_a`, given `dL/dE`.
pub fn adaptive_adjacency_backward(emb: &NodeEmbedding, grad_e: &Array2<f64>) -> Array2<f64> {
    let e_a = &emb.0;
    let v = e_a.nrows();
    let sim = e_a.dot(&e_a.t());
    let mut grad_sim = Array2::<f64>::zeros((v, v));
    for i in 0..v {
        let relu: Vec<f64> = sim.row(i).iter().map(|x| x.max(0.0)).collect();
        let p = sparsemax_row(&relu);
        let g: Vec<f64> = grad_e.row(i).to_vec();
        let g_relu = sparsemax_backward(&p, &g);
        for j in 0..v {
            if sim[(i, j)] > 0.0 {
                grad_sim[(i, j)] = g_relu[j];
            }
        }
    }
    // sim = E_a E_a^T
    (&grad_sim + &grad_sim.t()).dot(e_a)
}

/// Discrete pattern of the non-smooth pieces (ReLU signs and sparsemax
/// supports). Finite-difference checks compare this before and after a
/// perturbation to detect kinks.
pub fn adjacency_signature(emb: &NodeEmbedding) -> Vec<bool> {
    let e_a = &emb.0;
    let sim = e_a.dot(&e_a.t());
    let mut sig: Vec<bool> = sim.iter().map(|&x| x > 0.0).collect();
    for row in sim.rows() {
        let relu: Vec<f64> = row.iter().map(|x| x.max(0.0)).collect();
        sig.extend(sparsemax_row(&relu).into_iter().map(|p| p > 0.0));
    }
    sig
}
