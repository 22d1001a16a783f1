use std::collections::BTreeMap;

use crate::model::GraphS4Model;

/// One AdamW update with decoupled weight decay, applied in place.
/// `step` counts from 1.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) {
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for (((t, &g), mi), vi) in theta.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = b1 * *mi + (1.0 - b1) * g;
        *vi = b2 * *vi + (1.0 - b2) * g * g;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        let old = *t;
        *t = old - lr * m_hat / (v_hat.sqrt() + eps) - lr * weight_decay * old;
    }
}

/// AdamW over all model tensors, with per-name moment buffers.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    state: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

/// SSM parameters are not decayed toward zero.
fn decays(name: &str) -> bool {
    !name.contains(".ssm.")
}

impl AdamW {
    pub fn new(betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Self { betas, eps, weight_decay, step: 0, state: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every tensor whose name is not `frozen`, then clamps the SSM
    /// eigenvalues of layers whose `lambda` was updated.
    pub fn step(&mut self, model: &mut GraphS4Model, grads: &GraphS4Model, lr: f64, min_decay: f64, frozen: &dyn Fn(&str) -> bool) {
        self.step += 1;
        let mut g: Vec<Vec<f64>> = Vec::new();
        grads.visit_params(&mut |_, _, d| g.push(d.to_vec()));
        let mut g = g.into_iter();
        let (step, betas, eps, wd) = (self.step, self.betas, self.eps, self.weight_decay);
        let state = &mut self.state;
        model.visit_params_mut(&mut |name, _, theta| {
            let grad = g.next().expect("gradient layout matches the model");
            if frozen(name) {
                return;
            }
            let (m, v) = state.entry(name.to_string()).or_insert_with(|| (vec![0.0; theta.len()], vec![0.0; theta.len()]));
            let decay = if decays(name) { wd } else { 0.0 };
            adamw_step(theta, &grad, m, v, step, lr, betas, eps, decay);
        });
        for (i, layer) in model.layers.iter_mut().enumerate() {
            if !frozen(&format!("layers.{i}.ssm.lambda")) {
                layer.ssm.project_stable(min_decay);
            }
        }
    }
}
