//! The Graph-S4 network: stacked blocks of a shared-kernel SSM applied to
//! every node-channel sequence, GELU, diffusion mixing over the adaptive
//! graph, dropout and a residual connection.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{ForwardCache, Gradients, Mode, Prepared};

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph_mixing::{DiffusionMode, DiffusionWeights, NodeEmbedding};
use crate::ssm_core::{hippo_legs_decomposition, random_output_map, DplrParams, DplrView, LOG_DT_MAX, LOG_DT_MIN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub state_dim: usize,
    pub channels: usize,
    pub diffusion_steps: usize,
    pub dropout: f64,
    pub num_nodes: usize,
    pub emb_dim: usize,
    /// One output map `c` per layer instead of one per channel.
    pub share_c: bool,
    /// Use `E` instead of `E^d` in the diffusion sum.
    pub literal_no_power: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            state_dim: 128,
            channels: 5,
            diffusion_steps: 2,
            dropout: 0.2,
            num_nodes: 32,
            emb_dim: 10,
            share_c: false,
            literal_no_power: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("state_dim", self.state_dim),
            ("channels", self.channels),
            ("diffusion_steps", self.diffusion_steps),
            ("num_nodes", self.num_nodes),
            ("emb_dim", self.emb_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(format!("model.{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("model.dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn diffusion_mode(&self) -> DiffusionMode {
        if self.literal_no_power {
            DiffusionMode::LiteralNoPower
        } else {
            DiffusionMode::Powers
        }
    }

    fn output_maps(&self) -> usize {
        if self.share_c {
            1
        } else {
            self.channels
        }
    }
}

/// SSM parameters of one layer. `lambda, p, b, log_dt` are shared by every
/// node-channel sequence; `q` is tied to `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedSsm {
    pub lambda: Vec<Complex64>,
    pub p: Vec<Complex64>,
    pub b: Vec<Complex64>,
    pub log_dt: f64,
    /// Output maps, row-major `maps x N`.
    pub c: Vec<Complex64>,
}

impl SharedSsm {
    pub fn state_dim(&self) -> usize {
        self.lambda.len()
    }

    pub fn num_maps(&self) -> usize {
        self.c.len() / self.state_dim()
    }

    pub fn output_map(&self, i: usize) -> &[Complex64] {
        let n = self.state_dim();
        &self.c[i * n..(i + 1) * n]
    }

    pub fn view(&self) -> DplrView<'_> {
        DplrView { lambda: &self.lambda, p: &self.p, q: &self.p, b: &self.b, log_dt: self.log_dt }
    }

    /// Full DPLR parameters for output map `i`.
    pub fn dplr(&self, i: usize) -> DplrParams {
        DplrParams {
            lambda: self.lambda.clone(),
            p: self.p.clone(),
            q: self.p.clone(),
            b: self.b.clone(),
            c: self.output_map(i).to_vec(),
            log_dt: self.log_dt,
        }
    }

    /// Clamps `Re(lambda)` to at most `-min_decay`. With `q = p` this keeps
    /// the Hermitian part of `A` negative definite.
    pub fn project_stable(&mut self, min_decay: f64) {
        for l in &mut self.lambda {
            if l.re > -min_decay {
                l.re = -min_decay;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub ssm: SharedSsm,
    pub mix: DiffusionWeights,
    pub bias: Array1<f64>,
}

/// Linear classifier on time-pooled, flattened `(node, channel)` features.
#[derive(Clone, Debug, PartialEq)]
pub struct ClsHead {
    /// `2 x (V * C)`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphS4Model {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
    pub emb: NodeEmbedding,
    pub input_proj: Array1<f64>,
    pub output_proj: Array1<f64>,
    pub output_bias: f64,
    pub cls_head: Option<ClsHead>,
}

pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<GraphS4Model> {
    GraphS4Model::init(cfg, seed)
}

/// Exact GELU `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

impl GraphS4Model {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.state_dim;
        let c = cfg.channels;
        let legs = hippo_legs_decomposition(n)?;
        let b = legs.to_eigenbasis(&vec![Complex64::new(1.0, 0.0); n]);
        let bound = 1.0 / ((c * (cfg.diffusion_steps + 1)) as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for _ in 0..cfg.num_layers {
            let mut out_maps = Vec::with_capacity(cfg.output_maps() * n);
            for _ in 0..cfg.output_maps() {
                out_maps.extend(random_output_map(&mut rng, n));
            }
            let log_dt = rng.random_range(LOG_DT_MIN..LOG_DT_MAX);
            let ssm = SharedSsm { lambda: legs.lambda.clone(), p: legs.p.clone(), b: b.clone(), log_dt, c: out_maps };
            let mix = (0..=cfg.diffusion_steps)
                .map(|_| Array2::from_shape_simple_fn((c, c), || rng.random_range(-bound..bound)))
                .collect();
            layers.push(Layer { ssm, mix: DiffusionWeights(mix), bias: Array1::zeros(c) });
        }
        let emb = NodeEmbedding::new(Array2::from_shape_simple_fn((cfg.num_nodes, cfg.emb_dim), || rng.random::<f64>()))?;
        let input_proj = Array1::from_shape_simple_fn(c, || rng.random_range(-1.0..1.0));
        let out_bound = 1.0 / (c as f64).sqrt();
        let output_proj = Array1::from_shape_simple_fn(c, || rng.random_range(-out_bound..out_bound));
        Ok(Self { config: cfg.clone(), layers, emb, input_proj, output_proj, output_bias: 0.0, cls_head: None })
    }

    /// Attaches a freshly initialized classification head, replacing any existing one.
    pub fn init_cls_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = self.config.num_nodes * self.config.channels;
        let bound = 1.0 / (f as f64).sqrt();
        let w = Array2::from_shape_simple_fn((2, f), || rng.random_range(-bound..bound));
        self.cls_head = Some(ClsHead { w, b: Array1::zeros(2) });
    }

    /// A model of the same shape with every parameter set to zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_params_mut(&mut |_, _, data| data.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    /// Visits every trainable tensor in a fixed order as `(name, shape, data)`.
    /// Complex tensors appear as real arrays with a trailing dimension of 2.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let n = self.config.state_dim;
        let c = self.config.channels;
        for (i, layer) in self.layers.iter().enumerate() {
            let s = &layer.ssm;
            f(&format!("layers.{i}.ssm.lambda"), &[n, 2], bytemuck::cast_slice(&s.lambda));
            f(&format!("layers.{i}.ssm.p"), &[n, 2], bytemuck::cast_slice(&s.p));
            f(&format!("layers.{i}.ssm.b"), &[n, 2], bytemuck::cast_slice(&s.b));
            f(&format!("layers.{i}.ssm.log_dt"), &[], std::slice::from_ref(&s.log_dt));
            f(&format!("layers.{i}.ssm.c"), &[s.num_maps(), n, 2], bytemuck::cast_slice(&s.c));
            for (d, w) in layer.mix.0.iter().enumerate() {
                f(&format!("layers.{i}.mix.{d}"), &[c, c], w.as_slice().expect("standard layout"));
            }
            f(&format!("layers.{i}.bias"), &[c], layer.bias.as_slice().expect("standard layout"));
        }
        let e = &self.emb.0;
        f("emb", &[e.nrows(), e.ncols()], e.as_slice().expect("standard layout"));
        f("input_proj", &[c], self.input_proj.as_slice().expect("standard layout"));
        f("output_proj", &[c], self.output_proj.as_slice().expect("standard layout"));
        f("output_bias", &[], std::slice::from_ref(&self.output_bias));
        if let Some(head) = &self.cls_head {
            f("cls_head.w", &[2, head.w.ncols()], head.w.as_slice().expect("standard layout"));
            f("cls_head.b", &[2], head.b.as_slice().expect("standard layout"));
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let n = self.config.state_dim;
        let c = self.config.channels;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let s = &mut layer.ssm;
            let maps = s.num_maps();
            f(&format!("layers.{i}.ssm.lambda"), &[n, 2], bytemuck::cast_slice_mut(&mut s.lambda));
            f(&format!("layers.{i}.ssm.p"), &[n, 2], bytemuck::cast_slice_mut(&mut s.p));
            f(&format!("layers.{i}.ssm.b"), &[n, 2], bytemuck::cast_slice_mut(&mut s.b));
            f(&format!("layers.{i}.ssm.log_dt"), &[], std::slice::from_mut(&mut s.log_dt));
            f(&format!("layers.{i}.ssm.c"), &[maps, n, 2], bytemuck::cast_slice_mut(&mut s.c));
            for (d, w) in layer.mix.0.iter_mut().enumerate() {
                f(&format!("layers.{i}.mix.{d}"), &[c, c], w.as_slice_mut().expect("standard layout"));
            }
            f(&format!("layers.{i}.bias"), &[c], layer.bias.as_slice_mut().expect("standard layout"));
        }
        let e = &mut self.emb.0;
        let dims = [e.nrows(), e.ncols()];
        f("emb", &dims, e.as_slice_mut().expect("standard layout"));
        f("input_proj", &[c], self.input_proj.as_slice_mut().expect("standard layout"));
        f("output_proj", &[c], self.output_proj.as_slice_mut().expect("standard layout"));
        f("output_bias", &[], std::slice::from_mut(&mut self.output_bias));
        if let Some(head) = &mut self.cls_head {
            let cols = head.w.ncols();
            f("cls_head.w", &[2, cols], head.w.as_slice_mut().expect("standard layout"));
            f("cls_head.b", &[2], head.b.as_slice_mut().expect("standard layout"));
        }
    }

    /// Number of real scalars over all trainable tensors.
    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, _, data| total += data.len());
        total
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |name, _, _| names.push(name.to_string()));
        names
    }

    /// Adds `scale * other` to every parameter. Shapes must match.
    pub fn axpy(&mut self, scale: f64, other: &GraphS4Model) {
        let mut src: Vec<Vec<f64>> = Vec::new();
        other.visit_params(&mut |_, _, d| src.push(d.to_vec()));
        let mut it = src.into_iter();
        self.visit_params_mut(&mut |_, _, d| {
            let s = it.next().expect("matching parameter layout");
            for (a, b) in d.iter_mut().zip(s) {
                *a += scale * b;
            }
        });
    }

    /// True when every layer's reconstructed state matrix has eigenvalues
    /// with strictly negative real part.
    pub fn is_stable(&self) -> bool {
        self.layers.iter().all(|l| l.ssm.dplr(0).is_stable())
    }

    pub fn project_stable(&mut self, min_decay: f64) {
        for layer in &mut self.layers {
            layer.ssm.project_stable(min_decay);
        }
    }

    pub(crate) fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        let (v, t) = x.dim();
        if v != self.config.num_nodes {
            return Err(invalid(format!("input has {v} nodes, model expects {}", self.config.num_nodes)));
        }
        if t < 8 {
            return Err(invalid(format!("sequence length {t} is below the minimum of 8")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(invalid("input contains non-finite values"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.8413447460685429).abs() < 1e-12);
        assert!((gelu(-1.0) + 0.15865525393145707).abs() < 1e-12);
        let mut prev = 0.0;
        for i in 1..200 {
            let g = gelu(i as f64 * 0.05);
            assert!(g > prev);
            prev = g;
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn init_is_deterministic_and_stable() {
        let cfg = ModelConfig { num_layers: 2, state_dim: 8, channels: 3, num_nodes: 5, ..Default::default() };
        let a = GraphS4Model::init(&cfg, 7).unwrap();
        let b = GraphS4Model::init(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.is_stable());
        assert_ne!(a, GraphS4Model::init(&cfg, 8).unwrap());
    }

    #[test]
    fn parameter_count_from_shapes() {
        let cfg = ModelConfig { num_nodes: 118, ..Default::default() };
        let m = GraphS4Model::init(&cfg, 0).unwrap();
        let (s, n, c, k, v, e) = (4, 128, 5, 2, 118, 10);
        let per_layer = 3 * 2 * n + 1 + c * 2 * n + (k + 1) * c * c + c;
        assert_eq!(m.parameter_count(), s * per_layer + v * e + 2 * c + 1);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ModelConfig { dropout: 1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { channels: 0, ..Default::default() };
        assert!(GraphS4Model::init(&cfg, 0).is_err());
    }
}
