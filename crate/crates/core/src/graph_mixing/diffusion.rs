use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use super::{AdjacencyMatrix, DiffusionWeights};
use crate::error::{invalid, Result};

/// How the adjacency enters the diffusion sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionMode {
    /// `Z = sum_d E^d X W_d`.
    #[default]
    Powers,
    /// `Z = X W_0 + sum_{d>=1} E X W_d`, the formula read without exponents.
    LiteralNoPower,
}

/// Node-propagated inputs `H_d` kept for the backward pass.
#[derive(Clone, Debug)]
pub struct DiffusionCache {
    /// `H_d` for `d = 0..=D`, each `(node, channel, time)`.
    pub propagated: Vec<Array3<f64>>,
}

#[derive(Clone, Debug)]
pub struct DiffusionGrads {
    pub x: Array3<f64>,
    pub weights: Vec<Array2<f64>>,
    pub adjacency: Array2<f64>,
}

fn as_matrix(x: &Array3<f64>) -> ArrayView2<'_, f64> {
    let (v, c, t) = x.dim();
    x.view().into_shape_with_order((v, c * t)).expect("contiguous standard layout")
}

fn check_shapes(adj: &AdjacencyMatrix, x: ArrayView3<'_, f64>, weights: &DiffusionWeights) -> Result<()> {
    let (v, c_in, _) = x.dim();
    if weights.0.is_empty() {
        return Err(invalid("diffusion needs at least one weight matrix"));
    }
    if adj.0.dim() != (v, v) {
        return Err(invalid(format!("adjacency is {:?} but input has {v} nodes", adj.0.dim())));
    }
    let c_out = weights.0[0].ncols();
    if weights.0.iter().any(|w| w.dim() != (c_in, c_out)) {
        return Err(invalid("diffusion weights must all be C_in x C_out"));
    }
    Ok(())
}

/// Diffusion convolution on a `(node, channel, time)` tensor.
pub fn diffusion_conv(
    adj: &AdjacencyMatrix,
    x: &Array3<f64>,
    weights: &DiffusionWeights,
    mode: DiffusionMode,
) -> Result<Array3<f64>> {
    diffusion_forward(adj, x, weights, mode).map(|(z, _)| z)
}

pub fn diffusion_forward(
    adj: &AdjacencyMatrix,
    x: &Array3<f64>,
    weights: &DiffusionWeights,
    mode: DiffusionMode,
) -> Result<(Array3<f64>, DiffusionCache)> {
    check_shapes(adj, x.view(), weights)?;
    let (v, c_in, t) = x.dim();
    let c_out = weights.0[0].ncols();
    let x = x.as_standard_layout().into_owned();
    let mut propagated = vec![x.clone()];
    let e = &adj.0;
    for d in 1..weights.0.len() {
        let src = match mode {
            DiffusionMode::Powers => &propagated[d - 1],
            DiffusionMode::LiteralNoPower => &propagated[0],
        };
        let next = e.dot(&as_matrix(src)).into_shape_with_order((v, c_in, t)).expect("shape");
        propagated.push(next);
    }
    let mut z = Array3::<f64>::zeros((v, c_out, t));
    for (h, w) in propagated.iter().zip(&weights.0) {
        let wt = w.t();
        for (mut z_v, h_v) in z.axis_iter_mut(Axis(0)).zip(h.axis_iter(Axis(0))) {
            ndarray::linalg::general_mat_mul(1.0, &wt, &h_v, 1.0, &mut z_v);
        }
    }
    Ok((z, DiffusionCache { propagated }))
}

pub fn diffusion_backward(
    adj: &AdjacencyMatrix,
    weights: &DiffusionWeights,
    mode: DiffusionMode,
    cache: &DiffusionCache,
    grad_z: &Array3<f64>,
) -> DiffusionGrads {
    let h = &cache.propagated;
    let (v, c_in, t) = h[0].dim();
    let e = &adj.0;
    let mut grad_w = Vec::with_capacity(weights.0.len());
    let mut grad_h: Vec<Array3<f64>> = Vec::with_capacity(weights.0.len());
    for (h_d, w) in h.iter().zip(&weights.0) {
        let mut gw = Array2::<f64>::zeros(w.dim());
        let mut gh = Array3::<f64>::zeros((v, c_in, t));
        for ((h_v, gz_v), mut gh_v) in h_d.axis_iter(Axis(0)).zip(grad_z.axis_iter(Axis(0))).zip(gh.axis_iter_mut(Axis(0))) {
            ndarray::linalg::general_mat_mul(1.0, &h_v, &gz_v.t(), 1.0, &mut gw);
            ndarray::linalg::general_mat_mul(1.0, w, &gz_v, 0.0, &mut gh_v);
        }
        grad_w.push(gw);
        grad_h.push(gh);
    }
    let mut grad_e = Array2::<f64>::zeros((v, v));
    match mode {
        DiffusionMode::Powers => {
            for d in (1..h.len()).rev() {
                let g = as_matrix(&grad_h[d]).to_owned();
                grad_e += &g.dot(&as_matrix(&h[d - 1]).t());
                let back = e.t().dot(&g).into_shape_with_order((v, c_in, t)).expect("shape");
                grad_h[d - 1] += &back;
            }
        }
        DiffusionMode::LiteralNoPower => {
            for d in 1..h.len() {
                let g = as_matrix(&grad_h[d]).to_owned();
                grad_e += &g.dot(&as_matrix(&h[0]).t());
                let back = e.t().dot(&g).into_shape_with_order((v, c_in, t)).expect("shape");
                grad_h[0] += &back;
            }
        }
    }
    let grad_x = grad_h.swap_remove(0);
    DiffusionGrads { x: grad_x, weights: grad_w, adjacency: grad_e }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_steps_is_channel_mixing_only() {
        let adj = AdjacencyMatrix(array![[2.0, 0.0], [0.5, 1.5]]);
        let x = Array3::from_shape_fn((2, 2, 3), |(v, c, t)| (v * 6 + c * 3 + t) as f64);
        let w = array![[1.0, -1.0, 0.5], [2.0, 0.0, 1.0]];
        let z = diffusion_conv(&adj, &x, &DiffusionWeights(vec![w.clone()]), DiffusionMode::Powers).unwrap();
        for v in 0..2 {
            for t in 0..3 {
                for co in 0..3 {
                    let expected: f64 = (0..2).map(|ci| x[(v, ci, t)] * w[(ci, co)]).sum();
                    assert!((z[(v, co, t)] - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn scalar_one_step() {
        let adj = AdjacencyMatrix(array![[2.0]]);
        let x = Array3::from_elem((1, 1, 1), 3.0);
        let weights = DiffusionWeights(vec![array![[0.5]], array![[-1.5]]]);
        let z = diffusion_conv(&adj, &x, &weights, DiffusionMode::Powers).unwrap();
        assert!((z[(0, 0, 0)] - (3.0 * 0.5 + 2.0 * 3.0 * -1.5)).abs() < 1e-15);
    }

    #[test]
    fn literal_mode_differs_from_powers_at_two_steps() {
        let adj = AdjacencyMatrix(array![[2.0]]);
        let x = Array3::from_elem((1, 1, 1), 1.0);
        let weights = DiffusionWeights(vec![array![[0.0]], array![[0.0]], array![[1.0]]]);
        let powers = diffusion_conv(&adj, &x, &weights, DiffusionMode::Powers).unwrap();
        let literal = diffusion_conv(&adj, &x, &weights, DiffusionMode::LiteralNoPower).unwrap();
        assert_eq!(powers[(0, 0, 0)], 4.0);
        assert_eq!(literal[(0, 0, 0)], 2.0);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let adj = AdjacencyMatrix(Array2::eye(3) * 2.0);
        let x = Array3::zeros((3, 2, 4));
        let weights = DiffusionWeights(vec![Array2::ones((2, 2)), Array2::ones((2, 2))]);
        let z = diffusion_conv(&adj, &x, &weights, DiffusionMode::Powers).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let adj = AdjacencyMatrix(Array2::eye(2));
        let x = Array3::zeros((3, 2, 4));
        let weights = DiffusionWeights(vec![Array2::ones((2, 2))]);
        assert!(diffusion_conv(&adj, &x, &weights, DiffusionMode::Powers).is_err());
    }
}
