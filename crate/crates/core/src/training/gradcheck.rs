//! Central finite-difference checks of every analytic gradient.

use std::fmt;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::loss::{cross_entropy, loss_mse_pearson_grad, masked_loss, LossConfig};
use super::mix_seed;
use crate::error::Result;
use crate::graph_mixing::{
    adaptive_adjacency, adaptive_adjacency_backward, adjacency_signature, diffusion_backward, diffusion_forward,
    sparsemax_backward, sparsemax_row, AdjacencyMatrix, DiffusionMode, DiffusionWeights, NodeEmbedding,
};
use crate::model::{gelu, gelu_grad, Gradients, GraphS4Model, Mode, ModelConfig};
use crate::ssm_core::{accumulate_kernel_grad, hippo_legs_init, kernel_backward, kernel_fast, DplrParams, DplrView, FftConv};
use crate::tasks::{build_instance, trivial_partition, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub num_nodes: usize,
    pub timepoints: usize,
    pub state_dim: usize,
    pub channels: usize,
    pub diffusion_steps: usize,
    pub num_layers: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Fresh draws tried when a perturbation crosses a ReLU or sparsemax kink.
    pub max_resamples: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            num_nodes: 4,
            timepoints: 32,
            state_dim: 8,
            channels: 2,
            diffusion_steps: 1,
            num_layers: 2,
            step: 1e-5,
            tolerance: 1e-3,
            seed: 0,
            max_resamples: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.passed)
    }

    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    fn push(&mut self, name: impl Into<String>, analytic: &[f64], numeric: &[f64], tol: f64) {
        let rel_error = relative_error(analytic, numeric);
        self.entries.push(GradCheckEntry { name: name.into(), rel_error, passed: rel_error < tol });
    }

    pub fn extend(&mut self, other: GradCheckReport) {
        self.entries.extend(other.entries);
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(4).max(4);
        writeln!(f, "{:<width$}  {:>12}  status", "name", "rel_error")?;
        for e in &self.entries {
            writeln!(f, "{:<width$}  {:>12.3e}  {}", e.name, e.rel_error, if e.passed { "ok" } else { "FAIL" })?;
        }
        Ok(())
    }
}

/// Central differences of `f` at `x`.
pub fn finite_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest absolute difference relative to the largest magnitude of either
/// gradient; 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        return 0.0;
    }
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    diff / scale
}

fn reals(z: &[Complex64]) -> Vec<f64> {
    z.iter().flat_map(|c| [c.re, c.im]).collect()
}

fn complexes(x: &[f64]) -> Vec<Complex64> {
    x.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect()
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn check_kernel(cfg: &GradCheckConfig, report: &mut GradCheckReport) -> Result<()> {
    let l = cfg.timepoints;
    let mut params = hippo_legs_init(cfg.state_dim, cfg.seed)?;
    params.log_dt = -2.5;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1));
    let w = normals(&mut rng, l);
    let objective = |p: &DplrParams| -> f64 { kernel_fast(p, l).map(|k| k.0.iter().zip(&w).map(|(a, b)| a * b).sum()).unwrap_or(f64::NAN) };
    let g = kernel_backward(DplrView::from(&params), &[params.c.as_slice()], l, &[w.as_slice()])?;
    type Field = fn(&mut DplrParams) -> &mut Vec<Complex64>;
    let fields: [(&str, Field, &Vec<Complex64>); 5] = [
        ("lambda", |p| &mut p.lambda, &g.lambda),
        ("p", |p| &mut p.p, &g.p),
        ("q", |p| &mut p.q, &g.q),
        ("b", |p| &mut p.b, &g.b),
        ("c", |p| &mut p.c, &g.c[0]),
    ];
    for (name, field, analytic) in fields {
        let base = reals(field(&mut params.clone()));
        let numeric = finite_difference(
            &mut |x| {
                let mut p = params.clone();
                *field(&mut p) = complexes(x);
                objective(&p)
            },
            &base,
            cfg.step,
        );
        report.push(format!("ssm_core.kernel.{name}"), &reals(analytic), &numeric, cfg.tolerance);
    }
    let numeric = finite_difference(
        &mut |x| objective(&DplrParams { log_dt: x[0], ..params.clone() }),
        &[params.log_dt],
        cfg.step,
    );
    report.push("ssm_core.kernel.log_dt", &[g.log_dt], &numeric, cfg.tolerance);
    Ok(())
}

fn check_conv(cfg: &GradCheckConfig, report: &mut GradCheckReport) {
    let l = cfg.timepoints;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 2));
    let k = normals(&mut rng, l);
    let u = normals(&mut rng, l);
    let w = normals(&mut rng, l);
    let conv = FftConv::new(l);
    let mut ws = conv.workspace();
    let objective = |k: &[f64], u: &[f64]| {
        let mut ws = conv.workspace();
        let spec = conv.spectrum_vec(k, &mut ws);
        let mut y = vec![0.0; l];
        conv.convolve_spectrum(&spec, u, &mut ws, &mut y);
        y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
    };
    let k_spec = conv.spectrum_vec(&k, &mut ws);
    let mut g_u = vec![0.0; l];
    conv.correlate_spectrum(&k_spec, &w, &mut ws, &mut g_u);
    let u_spec = conv.spectrum_vec(&u, &mut ws);
    let w_spec = conv.spectrum_vec(&w, &mut ws);
    let mut acc = vec![Complex64::new(0.0, 0.0); conv.spectrum_len()];
    accumulate_kernel_grad(&mut acc, &u_spec, &w_spec);
    let mut g_k = vec![0.0; l];
    conv.inverse(&mut acc, &mut ws, &mut g_k);
    let num_u = finite_difference(&mut |x| objective(&k, x), &u, cfg.step);
    let num_k = finite_difference(&mut |x| objective(x, &u), &k, cfg.step);
    report.push("ssm_core.causal_conv.input", &g_u, &num_u, cfg.tolerance);
    report.push("ssm_core.causal_conv.kernel", &g_k, &num_k, cfg.tolerance);
}

fn check_sparsemax(cfg: &GradCheckConfig, report: &mut GradCheckReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 3));
    for attempt in 0..=cfg.max_resamples {
        let z: Vec<f64> = normals(&mut rng, 6).iter().map(|v| 0.3 * v).collect();
        let w = normals(&mut rng, 6);
        let p = sparsemax_row(&z);
        let narrow = p.iter().filter(|&&v| v > 0.0).count() < 3;
        let support = |x: &[f64]| sparsemax_row(x).iter().map(|&v| v > 0.0).collect::<Vec<_>>();
        let base = support(&z);
        let kink = (0..z.len()).any(|i| {
            let mut a = z.clone();
            a[i] += cfg.step;
            let mut b = z.clone();
            b[i] -= cfg.step;
            support(&a) != base || support(&b) != base
        });
        if (kink || narrow) && attempt < cfg.max_resamples {
            continue;
        }
        let analytic = sparsemax_backward(&p, &w);
        let numeric = finite_difference(&mut |x| sparsemax_row(x).iter().zip(&w).map(|(a, b)| a * b).sum(), &z, cfg.step);
        report.push("graph_mixing.sparsemax", &analytic, &numeric, cfg.tolerance);
        return;
    }
}

fn random_embedding(rng: &mut ChaCha8Rng, v: usize, d: usize) -> NodeEmbedding {
    NodeEmbedding(Array2::from_shape_fn((v, d), |_| rng.random_range(-1.0..1.0)))
}

fn embedding_has_kink(emb: &NodeEmbedding, h: f64) -> bool {
    let base = adjacency_signature(emb);
    (0..emb.0.len()).any(|i| {
        [h, -h].iter().any(|&d| {
            let mut e = emb.clone();
            e.0.as_slice_mut().expect("standard layout")[i] += d;
            adjacency_signature(&e) != base
        })
    })
}

fn check_adjacency(cfg: &GradCheckConfig, report: &mut GradCheckReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 4));
    let v = cfg.num_nodes.max(3);
    let mut emb = random_embedding(&mut rng, v, 3);
    for _ in 0..cfg.max_resamples {
        if !embedding_has_kink(&emb, cfg.step) {
            break;
        }
        emb = random_embedding(&mut rng, v, 3);
    }
    let w = Array2::from_shape_vec((v, v), normals(&mut rng, v * v)).expect("shape");
    let analytic = adaptive_adjacency_backward(&emb, &w);
    let base = emb.0.as_slice().expect("standard layout").to_vec();
    let numeric = finite_difference(
        &mut |x| {
            let e = NodeEmbedding(Array2::from_shape_vec((v, 3), x.to_vec()).expect("shape"));
            (&adaptive_adjacency(&e).0 * &w).sum()
        },
        &base,
        cfg.step,
    );
    report.push("graph_mixing.adjacency", analytic.as_slice().expect("standard layout"), &numeric, cfg.tolerance);
}

fn check_diffusion(cfg: &GradCheckConfig, report: &mut GradCheckReport) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 5));
    let (v, c, t) = (cfg.num_nodes, cfg.channels, 5);
    let adj = AdjacencyMatrix(Array2::from_shape_vec((v, v), normals(&mut rng, v * v)).expect("shape"));
    let weights = DiffusionWeights(
        (0..=2).map(|_| Array2::from_shape_vec((c, c), normals(&mut rng, c * c)).expect("shape")).collect(),
    );
    let x = Array3::from_shape_vec((v, c, t), normals(&mut rng, v * c * t)).expect("shape");
    let g_z = Array3::from_shape_vec((v, c, t), normals(&mut rng, v * c * t)).expect("shape");
    for (label, mode) in [("powers", DiffusionMode::Powers), ("literal", DiffusionMode::LiteralNoPower)] {
        let objective = |adj: &AdjacencyMatrix, x: &Array3<f64>, w: &DiffusionWeights| {
            (&diffusion_forward(adj, x, w, mode).expect("shapes").0 * &g_z).sum()
        };
        let (_, cache) = diffusion_forward(&adj, &x, &weights, mode)?;
        let g = diffusion_backward(&adj, &weights, mode, &cache, &g_z);
        let num_x = finite_difference(
            &mut |p| objective(&adj, &Array3::from_shape_vec(x.dim(), p.to_vec()).expect("shape"), &weights),
            x.as_slice().expect("standard layout"),
            cfg.step,
        );
        report.push(format!("graph_mixing.diffusion.{label}.input"), g.x.as_standard_layout().as_slice().expect("layout"), &num_x, cfg.tolerance);
        let num_a = finite_difference(
            &mut |p| objective(&AdjacencyMatrix(Array2::from_shape_vec((v, v), p.to_vec()).expect("shape")), &x, &weights),
            adj.0.as_slice().expect("standard layout"),
            cfg.step,
        );
        report.push(format!("graph_mixing.diffusion.{label}.adjacency"), g.adjacency.as_standard_layout().as_slice().expect("layout"), &num_a, cfg.tolerance);
        let flat: Vec<f64> = weights.0.iter().flat_map(|w| w.iter().copied()).collect();
        let num_w = finite_difference(
            &mut |p| {
                let w = DiffusionWeights(p.chunks_exact(c * c).map(|ch| Array2::from_shape_vec((c, c), ch.to_vec()).expect("shape")).collect());
                objective(&adj, &x, &w)
            },
            &flat,
            cfg.step,
        );
        let analytic: Vec<f64> = g.weights.iter().flat_map(|w| w.iter().copied()).collect();
        report.push(format!("graph_mixing.diffusion.{label}.weights"), &analytic, &num_w, cfg.tolerance);
    }
    Ok(())
}

fn check_pointwise(cfg: &GradCheckConfig, report: &mut GradCheckReport) -> Result<()> {
    let xs: Vec<f64> = (0..21).map(|i| -4.0 + 0.4 * i as f64).collect();
    let analytic: Vec<f64> = xs.iter().map(|&x| gelu_grad(x)).collect();
    let numeric: Vec<f64> = xs.iter().map(|&x| (gelu(x + cfg.step) - gelu(x - cfg.step)) / (2.0 * cfg.step)).collect();
    report.push("model.gelu", &analytic, &numeric, cfg.tolerance);

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 6));
    let (v, t) = (3, 7);
    let y = Array2::from_shape_vec((v, t), normals(&mut rng, v * t)).expect("shape");
    let yh = Array2::from_shape_vec((v, t), normals(&mut rng, v * t)).expect("shape");
    let loss_cfg = LossConfig::default();
    let (_, g) = loss_mse_pearson_grad(&y, &yh, &loss_cfg)?;
    let numeric = finite_difference(
        &mut |p| loss_mse_pearson_grad(&y, &Array2::from_shape_vec((v, t), p.to_vec()).expect("shape"), &loss_cfg).expect("shapes").0.loss,
        yh.as_slice().expect("standard layout"),
        cfg.step,
    );
    report.push("training.loss", g.as_slice().expect("standard layout"), &numeric, cfg.tolerance);

    let logits = [0.3, -1.1];
    let (_, g) = cross_entropy(logits, 1);
    let numeric = finite_difference(&mut |p| cross_entropy([p[0], p[1]], 1).0, &logits, cfg.step);
    report.push("training.cross_entropy", &g, &numeric, cfg.tolerance);
    Ok(())
}

/// Parameter vector of `model` in visiting order, one entry per tensor.
fn flat_params(model: &GraphS4Model) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    model.visit_params(&mut |name, _, d| out.push((name.to_string(), d.to_vec())));
    out
}

fn set_tensor(model: &mut GraphS4Model, target: &str, values: &[f64]) {
    model.visit_params_mut(&mut |name, _, d| {
        if name == target {
            d.copy_from_slice(values);
        }
    });
}

#[derive(Clone, Copy)]
enum Objective {
    Sequence,
    Classification,
}

fn model_objective(model: &GraphS4Model, objective: Objective, inst: &crate::tasks::TaskInstance, loss: &LossConfig, dropout: u64) -> Result<f64> {
    let prep = model.prepare(inst.input.ncols(), Mode::Conv)?;
    Ok(match objective {
        Objective::Sequence => {
            let pred = model.forward_seq_with(&prep, &inst.input, Some(dropout))?.0;
            masked_loss(&pred, inst, loss)?.0.loss
        }
        Objective::Classification => cross_entropy(model.forward_cls_with(&prep, &inst.input, Some(dropout))?.0, 1).0,
    })
}

/// Gradients of a small model under the masked loss and the classification
/// loss, against finite differences for every tensor.
pub fn check_model_gradients(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let model_cfg = ModelConfig {
        num_layers: cfg.num_layers,
        state_dim: cfg.state_dim,
        channels: cfg.channels,
        diffusion_steps: cfg.diffusion_steps,
        num_nodes: cfg.num_nodes,
        emb_dim: 3,
        dropout: 0.2,
        ..ModelConfig::default()
    };
    let mut attempt = 0u64;
    let mut model = loop {
        let mut m = GraphS4Model::init(&model_cfg, mix_seed(cfg.seed, 100 + attempt))?;
        m.init_cls_head(mix_seed(cfg.seed, 200 + attempt));
        if !embedding_has_kink(&m.emb, cfg.step) || attempt as usize >= cfg.max_resamples {
            break m;
        }
        attempt += 1;
    };
    // Larger steps keep the kernels away from the trivial small-dt regime.
    for layer in &mut model.layers {
        layer.ssm.log_dt = -1.5;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 7));
    let x = Array2::from_shape_vec((cfg.num_nodes, cfg.timepoints), normals(&mut rng, cfg.num_nodes * cfg.timepoints)).expect("shape");
    let spec = TaskSpec::RandomMask { mask_fraction: 0.5, num_eval_masks: 1 };
    let inst = build_instance(&x, &spec, &trivial_partition(cfg.num_nodes), cfg.seed)?;
    let loss = LossConfig::default();
    let dropout = mix_seed(cfg.seed, 8);

    let mut report = GradCheckReport::default();
    for (label, objective) in [("sequence", Objective::Sequence), ("classification", Objective::Classification)] {
        let prep = model.prepare(cfg.timepoints, Mode::Conv)?;
        let mut grads = Gradients::new(&model, &prep);
        match objective {
            Objective::Sequence => {
                let (pred, cache) = model.forward_seq_with(&prep, &inst.input, Some(dropout))?;
                let (_, g) = masked_loss(&pred, &inst, &loss)?;
                model.backward_seq(&prep, &cache, &g, &mut grads)?;
            }
            Objective::Classification => {
                let (logits, cache) = model.forward_cls_with(&prep, &inst.input, Some(dropout))?;
                let (_, g) = cross_entropy(logits, 1);
                model.backward_cls(&prep, &cache, g, &mut grads)?;
            }
        }
        let analytic = grads.finish(&model, &prep)?;
        let analytic = flat_params(&analytic);
        for (name, base) in flat_params(&model) {
            let grad = &analytic.iter().find(|(n, _)| *n == name).expect("same layout").1;
            let mut probe = model.clone();
            let numeric = finite_difference(
                &mut |p| {
                    set_tensor(&mut probe, &name, p);
                    model_objective(&probe, objective, &inst, &loss, dropout).unwrap_or(f64::NAN)
                },
                &base,
                cfg.step,
            );
            report.push(format!("model.{label}.{name}"), grad, &numeric, cfg.tolerance);
        }
    }
    Ok(report)
}

/// Checks every differentiable building block in isolation.
pub fn check_operations(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    check_kernel(cfg, &mut report)?;
    check_conv(cfg, &mut report);
    check_sparsemax(cfg, &mut report);
    check_adjacency(cfg, &mut report);
    check_diffusion(cfg, &mut report)?;
    check_pointwise(cfg, &mut report)?;
    Ok(report)
}

/// [`check_operations`] followed by [`check_model_gradients`].
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut report = check_operations(cfg)?;
    report.extend(check_model_gradients(cfg)?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-15);
    }

    #[test]
    fn finite_difference_of_quadratic() {
        let g = finite_difference(&mut |x| x[0] * x[0] + 3.0 * x[1], &[2.0, 5.0], 1e-4);
        assert!((g[0] - 4.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }
}
