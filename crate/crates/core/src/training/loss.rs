use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tasks::TaskInstance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub pearson_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 0.5, pearson_eps: 1e-8 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(invalid("loss.lambda1 and loss.lambda2 must be non-negative"));
        }
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 {
            return Err(invalid("loss.lambda1 and loss.lambda2 cannot both be zero"));
        }
        if !(self.pearson_eps > 0.0) {
            return Err(invalid("loss.pearson_eps must be positive"));
        }
        Ok(())
    }

    /// The MSE-only configuration used for anomaly scores.
    pub fn mse_only() -> Self {
        Self { lambda1: 1.0, lambda2: 0.0, pearson_eps: 1e-8 }
    }
}

/// Loss value with its two components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub loss: f64,
    pub mse: f64,
    /// Mean per-node correlation.
    pub pearson: f64,
}

impl LossParts {
    pub fn mean(parts: &[LossParts]) -> LossParts {
        let n = parts.len().max(1) as f64;
        LossParts {
            loss: parts.iter().map(|p| p.loss).sum::<f64>() / n,
            mse: parts.iter().map(|p| p.mse).sum::<f64>() / n,
            pearson: parts.iter().map(|p| p.pearson).sum::<f64>() / n,
        }
    }
}

/// Pearson correlation of `y` and `y_hat` and its gradient with respect to
/// `y_hat`. Both root sums of squares are guarded as `sqrt(s + eps^2)`, so a
/// constant series correlates 0 with anything.
pub fn pearson_with_grad(y: &[f64], y_hat: &[f64], eps: f64) -> (f64, Vec<f64>) {
    let n = y.len() as f64;
    let my = y.iter().sum::<f64>() / n;
    let mh = y_hat.iter().sum::<f64>() / n;
    let a: Vec<f64> = y.iter().map(|v| v - my).collect();
    let b: Vec<f64> = y_hat.iter().map(|v| v - mh).collect();
    let sab: f64 = a.iter().zip(&b).map(|(x, z)| x * z).sum();
    let saa = a.iter().map(|x| x * x).sum::<f64>() + eps * eps;
    let sbb = b.iter().map(|x| x * x).sum::<f64>() + eps * eps;
    let denom = saa.sqrt() * sbb.sqrt();
    let corr = sab / denom;
    let grad = a.iter().zip(&b).map(|(ai, bi)| ai / denom - corr * bi / sbb).collect();
    (corr, grad)
}

struct Rows {
    y: Vec<Vec<f64>>,
    y_hat: Vec<Vec<f64>>,
    pos: Vec<Vec<(usize, usize)>>,
}

fn weighted_loss(rows: &Rows, cfg: &LossConfig) -> Result<(LossParts, Vec<Vec<f64>>)> {
    let count: usize = rows.y.iter().map(Vec::len).sum();
    if rows.y.is_empty() || count == 0 {
        return Err(invalid("loss needs at least one position"));
    }
    if rows.y.iter().any(|r| r.len() < 2) {
        return Err(invalid("loss needs at least 2 timepoints per node"));
    }
    let nodes = rows.y.len() as f64;
    let mut sq = 0.0;
    let mut corr_sum = 0.0;
    let mut grads = Vec::with_capacity(rows.y.len());
    for (y, yh) in rows.y.iter().zip(&rows.y_hat) {
        let (corr, g_corr) = pearson_with_grad(y, yh, cfg.pearson_eps);
        corr_sum += corr;
        let g: Vec<f64> = y
            .iter()
            .zip(yh)
            .zip(&g_corr)
            .map(|((yi, hi), gc)| {
                sq += (yi - hi) * (yi - hi);
                cfg.lambda1 * 2.0 * (hi - yi) / count as f64 - cfg.lambda2 * gc / nodes
            })
            .collect();
        grads.push(g);
    }
    let mse = sq / count as f64;
    let pearson = corr_sum / nodes;
    Ok((LossParts { loss: cfg.lambda1 * mse - cfg.lambda2 * pearson, mse, pearson }, grads))
}

/// `lambda1 * MSE - lambda2 * mean_i corr(y_i, y_hat_i)` over the rows of
/// two equally shaped matrices.
pub fn loss_mse_pearson(y: &Array2<f64>, y_hat: &Array2<f64>, cfg: &LossConfig) -> Result<f64> {
    Ok(loss_mse_pearson_grad(y, y_hat, cfg)?.0.loss)
}

pub fn loss_mse_pearson_grad(y: &Array2<f64>, y_hat: &Array2<f64>, cfg: &LossConfig) -> Result<(LossParts, Array2<f64>)> {
    if y.dim() != y_hat.dim() {
        return Err(invalid("loss operands differ in shape"));
    }
    if y.ncols() < 2 {
        return Err(invalid("loss needs at least 2 timepoints"));
    }
    let rows = Rows {
        y: y.rows().into_iter().map(|r| r.to_vec()).collect(),
        y_hat: y_hat.rows().into_iter().map(|r| r.to_vec()).collect(),
        pos: Vec::new(),
    };
    let (parts, g) = weighted_loss(&rows, cfg)?;
    let grad = Array2::from_shape_vec(y.dim(), g.concat()).expect("row lengths match");
    Ok((parts, grad))
}

/// The loss restricted to the instance's loss mask: every node with masked
/// positions contributes its masked positions as one sequence. Returns the
/// gradient with respect to the full prediction (zero off the mask).
pub fn masked_loss(pred: &Array2<f64>, inst: &TaskInstance, cfg: &LossConfig) -> Result<(LossParts, Array2<f64>)> {
    if pred.dim() != inst.target.dim() {
        return Err(invalid("prediction shape differs from the target"));
    }
    let mut rows = Rows { y: Vec::new(), y_hat: Vec::new(), pos: Vec::new() };
    for (i, mask_row) in inst.loss_mask.rows().into_iter().enumerate() {
        let pos: Vec<(usize, usize)> = mask_row.iter().enumerate().filter(|(_, &m)| m).map(|(j, _)| (i, j)).collect();
        if pos.is_empty() {
            continue;
        }
        rows.y.push(pos.iter().map(|&p| inst.target[p]).collect());
        rows.y_hat.push(pos.iter().map(|&p| pred[p]).collect());
        rows.pos.push(pos);
    }
    let (parts, g) = weighted_loss(&rows, cfg)?;
    let mut grad = Array2::zeros(pred.dim());
    for (pos, g) in rows.pos.iter().zip(g) {
        for (&p, gv) in pos.iter().zip(g) {
            grad[p] = gv;
        }
    }
    Ok((parts, grad))
}

/// Softmax cross-entropy of two logits and its gradient.
pub fn cross_entropy(logits: [f64; 2], class: u8) -> (f64, [f64; 2]) {
    let m = logits[0].max(logits[1]);
    let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
    let s = e[0] + e[1];
    let p = [e[0] / s, e[1] / s];
    let k = usize::from(class != 0);
    let loss = -(p[k].ln());
    let mut g = p;
    g[k] -= 1.0;
    (loss, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn both_one() -> LossConfig {
        LossConfig { lambda1: 1.0, lambda2: 1.0, pearson_eps: 1e-8 }
    }

    #[test]
    fn worked_examples() {
        let y = array![[1.0, -1.0]];
        let yh = array![[-1.0, 1.0]];
        assert!((loss_mse_pearson(&y, &yh, &both_one()).unwrap() - 5.0).abs() < 1e-9);
        let y = array![[0.3, 1.2, -0.4], [2.0, 0.0, 1.0]];
        assert!((loss_mse_pearson(&y, &y, &both_one()).unwrap() + 1.0).abs() < 1e-9);
        let c = array![[2.0, 2.0, 2.0]];
        let yh = array![[1.0, 3.0, 2.5]];
        let l = loss_mse_pearson(&c, &yh, &both_one()).unwrap();
        let mse = (1.0 + 1.0 + 0.25) / 3.0;
        assert!((l - mse).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_differences() {
        let y = array![[0.3, 1.2, -0.4, 0.9], [2.0, 0.0, 1.0, -1.0]];
        let yh = array![[0.1, 0.7, 0.2, 1.5], [1.0, -0.3, 0.8, 0.2]];
        let cfg = LossConfig::default();
        let (_, g) = loss_mse_pearson_grad(&y, &yh, &cfg).unwrap();
        let h = 1e-6;
        for idx in 0..8 {
            let (i, j) = (idx / 4, idx % 4);
            let mut p = yh.clone();
            p[(i, j)] += h;
            let mut m = yh.clone();
            m[(i, j)] -= h;
            let fd = (loss_mse_pearson(&y, &p, &cfg).unwrap() - loss_mse_pearson(&y, &m, &cfg).unwrap()) / (2.0 * h);
            assert!((fd - g[(i, j)]).abs() < 1e-7);
        }
    }

    #[test]
    fn pearson_term_is_affine_invariant() {
        let y = [0.3, 1.2, -0.4, 0.9];
        let yh = [0.1, 0.7, 0.2, 1.5];
        let moved: Vec<f64> = yh.iter().map(|v| 3.0 * v - 2.0).collect();
        let a = pearson_with_grad(&y, &yh, 1e-8).0;
        let b = pearson_with_grad(&y, &moved, 1e-8).0;
        assert!((a - b).abs() < 1e-8);
    }

    #[test]
    fn mse_gradient_vanishes_at_target() {
        let y = array![[0.3, 1.2, -0.4]];
        let cfg = LossConfig { lambda1: 1.0, lambda2: 0.0, pearson_eps: 1e-8 };
        let (_, g) = loss_mse_pearson_grad(&y, &y, &cfg).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_sequences_rejected() {
        assert!(loss_mse_pearson(&array![[1.0]], &array![[1.0]], &LossConfig::default()).is_err());
    }

    #[test]
    fn uniform_logits_cost_ln2() {
        let (l, g) = cross_entropy([0.4, 0.4], 1);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g[0] - 0.5).abs() < 1e-15 && (g[1] + 0.5).abs() < 1e-15);
    }
}
