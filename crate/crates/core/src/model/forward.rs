use ndarray::{Array1, Array2, Array3, Axis, Zip};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gelu, gelu_grad, GraphS4Model};
use crate::error::{invalid, Error, Result};
use crate::graph_mixing::{
    adaptive_adjacency, adaptive_adjacency_backward, diffusion_backward, diffusion_forward, AdjacencyMatrix,
    DiffusionCache,
};
use crate::ssm_core::{discretize_bilinear, kernel_backward, kernel_fast_multi, ssm_scan, DiscreteSsm, FftConv};

/// How each layer applies its SSM to the node-channel sequences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// FFT convolution with the structured kernel.
    #[default]
    Conv,
    /// The recurrence, step by step.
    Scan,
}

struct PreparedLayer {
    spectra: Vec<Vec<Complex64>>,
    discrete: Vec<DiscreteSsm>,
}

/// Per-parameter-state quantities shared by every sample of a given length:
/// the adjacency matrix and each layer's kernels.
pub struct Prepared {
    mode: Mode,
    len: usize,
    adj: AdjacencyMatrix,
    conv: FftConv,
    layers: Vec<PreparedLayer>,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn adjacency(&self) -> &AdjacencyMatrix {
        &self.adj
    }
}

struct LayerCache {
    input: Array3<f64>,
    pre_act: Array3<f64>,
    /// Spectra of the input sequences, `(V * C) x spectrum_len`.
    input_spec: Vec<Complex64>,
    diffusion: DiffusionCache,
    keep: Option<Array3<f64>>,
}

/// Activations recorded by a training forward pass.
pub struct ForwardCache {
    x: Option<Array2<f64>>,
    start: usize,
    layers: Vec<LayerCache>,
    last: Array3<f64>,
}

impl ForwardCache {
    /// Output of the last layer, `(node, channel, time)`.
    pub fn features(&self) -> &Array3<f64> {
        &self.last
    }
}

/// Gradient accumulator shaped like the model, plus the frequency-domain
/// kernel gradients and the adjacency gradient, which are folded into the
/// parameter gradients by [`Gradients::finish`].
pub struct Gradients {
    pub params: GraphS4Model,
    kernel_spec: Vec<Vec<Vec<Complex64>>>,
    adjacency: Array2<f64>,
}

impl Gradients {
    pub fn new(model: &GraphS4Model, prep: &Prepared) -> Self {
        let spec_len = prep.conv.spectrum_len();
        let kernel_spec = model
            .layers
            .iter()
            .map(|l| vec![vec![Complex64::new(0.0, 0.0); spec_len]; l.ssm.num_maps()])
            .collect();
        let v = model.config.num_nodes;
        Self { params: model.zeros_like(), kernel_spec, adjacency: Array2::zeros((v, v)) }
    }

    pub fn merge(&mut self, other: &Gradients) {
        self.params.axpy(1.0, &other.params);
        for (a, b) in self.kernel_spec.iter_mut().zip(&other.kernel_spec) {
            for (a, b) in a.iter_mut().zip(b) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
        self.adjacency += &other.adjacency;
    }

    /// Scales every accumulated quantity, e.g. to average over a batch.
    pub fn scale(&mut self, s: f64) {
        self.params.visit_params_mut(&mut |_, _, d| d.iter_mut().for_each(|v| *v *= s));
        for spec in self.kernel_spec.iter_mut().flatten() {
            spec.iter_mut().for_each(|v| *v *= s);
        }
        self.adjacency *= s;
    }

    /// Pushes the kernel and adjacency gradients back to the SSM parameters
    /// and the node embedding.
    pub fn finish(mut self, model: &GraphS4Model, prep: &Prepared) -> Result<GraphS4Model> {
        let mut ws = prep.conv.workspace();
        let t = prep.len;
        for ((layer, grad_layer), specs) in model.layers.iter().zip(&mut self.params.layers).zip(&mut self.kernel_spec) {
            if specs.iter().all(|s| s.iter().all(|v| *v == Complex64::new(0.0, 0.0))) {
                continue;
            }
            let grad_k: Vec<Vec<f64>> = specs
                .iter_mut()
                .map(|s| {
                    let mut out = vec![0.0; t];
                    prep.conv.inverse(s, &mut ws, &mut out);
                    out
                })
                .collect();
            let maps: Vec<&[Complex64]> = (0..layer.ssm.num_maps()).map(|i| layer.ssm.output_map(i)).collect();
            let gk: Vec<&[f64]> = grad_k.iter().map(|g| g.as_slice()).collect();
            let kg = kernel_backward(layer.ssm.view(), &maps, t, &gk)?;
            let g = &mut grad_layer.ssm;
            add_complex(&mut g.lambda, &kg.lambda);
            add_complex(&mut g.p, &kg.p);
            add_complex(&mut g.p, &kg.q);
            add_complex(&mut g.b, &kg.b);
            let n = g.state_dim();
            for (i, gc) in kg.c.iter().enumerate() {
                add_complex(&mut g.c[i * n..(i + 1) * n], gc);
            }
            g.log_dt += kg.log_dt;
        }
        if self.adjacency.iter().any(|&v| v != 0.0) {
            let g_emb = adaptive_adjacency_backward(&model.emb, &self.adjacency);
            self.params.emb.0 += &g_emb;
        }
        Ok(self.params)
    }
}

fn add_complex(acc: &mut [Complex64], g: &[Complex64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

impl GraphS4Model {
    /// Builds the adjacency and per-layer kernels for sequences of length `t`.
    pub fn prepare(&self, t: usize, mode: Mode) -> Result<Prepared> {
        if t == 0 {
            return Err(invalid("sequence length must be positive"));
        }
        let adj = adaptive_adjacency(&self.emb);
        let conv = FftConv::new(t);
        let mut ws = conv.workspace();
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let s = &layer.ssm;
            let prepared = match mode {
                Mode::Conv => {
                    let maps: Vec<_> = (0..s.num_maps()).map(|i| s.output_map(i)).collect();
                    let kernels = kernel_fast_multi(s.view(), &maps, t)?;
                    let spectra = kernels.iter().map(|k| conv.spectrum_vec(k, &mut ws)).collect();
                    PreparedLayer { spectra, discrete: Vec::new() }
                }
                Mode::Scan => {
                    let discrete = (0..s.num_maps()).map(|i| discretize_bilinear(&s.dplr(i))).collect::<Result<_>>()?;
                    PreparedLayer { spectra: Vec::new(), discrete }
                }
            };
            layers.push(prepared);
        }
        Ok(Prepared { mode, len: t, adj, conv, layers })
    }

    /// Sequence prediction in eval mode.
    pub fn forward_seq(&self, x: &Array2<f64>, mode: Mode) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let prep = self.prepare(x.ncols(), mode)?;
        Ok(self.forward_seq_with(&prep, x, None)?.0)
    }

    /// Class logits in eval mode.
    pub fn forward_cls(&self, x: &Array2<f64>) -> Result<[f64; 2]> {
        self.check_input(x)?;
        let prep = self.prepare(x.ncols(), Mode::Conv)?;
        Ok(self.forward_cls_with(&prep, x, None)?.0)
    }

    /// Sequence prediction against prepared kernels. `dropout_seed` switches
    /// on training mode.
    pub fn forward_seq_with(
        &self,
        prep: &Prepared,
        x: &Array2<f64>,
        dropout_seed: Option<u64>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_prepared(prep, x)?;
        let h0 = self.lift(x);
        let cache = self.run_layers(prep, h0, 0, dropout_seed);
        let y = self.project_out(&cache.last);
        Ok((y, ForwardCache { x: Some(x.clone()), ..cache }))
    }

    pub fn forward_cls_with(
        &self,
        prep: &Prepared,
        x: &Array2<f64>,
        dropout_seed: Option<u64>,
    ) -> Result<([f64; 2], ForwardCache)> {
        self.check_prepared(prep, x)?;
        let h0 = self.lift(x);
        let cache = self.run_layers(prep, h0, 0, dropout_seed);
        let logits = self.classify(&cache.last)?;
        Ok((logits, ForwardCache { x: Some(x.clone()), ..cache }))
    }

    /// Output of the first `upto` layers in eval mode, the input to layer `upto`.
    pub fn trunk_features(&self, prep: &Prepared, x: &Array2<f64>, upto: usize) -> Result<Array3<f64>> {
        self.check_prepared(prep, x)?;
        let mut h = self.lift(x);
        for l in 0..upto.min(self.layers.len()) {
            h = self.layer_forward(prep, l, h, None, false).0;
        }
        Ok(h)
    }

    /// Classification starting from precomputed features entering layer `start`.
    pub fn forward_cls_from(
        &self,
        prep: &Prepared,
        h: Array3<f64>,
        start: usize,
        dropout_seed: Option<u64>,
    ) -> Result<([f64; 2], ForwardCache)> {
        let (v, c, t) = h.dim();
        if v != self.config.num_nodes || c != self.config.channels || t != prep.len {
            return Err(invalid("feature tensor does not match the model"));
        }
        let cache = self.run_layers(prep, h, start, dropout_seed);
        let logits = self.classify(&cache.last)?;
        Ok((logits, cache))
    }

    /// Time-averaged final features flattened node-major.
    pub fn pooled_features(features: &Array3<f64>) -> Array1<f64> {
        let (v, c, _) = features.dim();
        features.mean_axis(Axis(2)).expect("non-empty time axis").into_shape_with_order(v * c).expect("shape")
    }

    fn classify(&self, last: &Array3<f64>) -> Result<[f64; 2]> {
        let head = self.cls_head.as_ref().ok_or_else(|| Error::State("classification head is not initialized".into()))?;
        let f = Self::pooled_features(last);
        let z = head.w.dot(&f) + &head.b;
        Ok([z[0], z[1]])
    }

    fn check_prepared(&self, prep: &Prepared, x: &Array2<f64>) -> Result<()> {
        self.check_input(x)?;
        if x.ncols() != prep.len || prep.layers.len() != self.layers.len() {
            return Err(invalid("prepared kernels do not match the input length"));
        }
        Ok(())
    }

    fn lift(&self, x: &Array2<f64>) -> Array3<f64> {
        let (v, t) = x.dim();
        let c = self.config.channels;
        Array3::from_shape_fn((v, c, t), |(i, j, k)| self.input_proj[j] * x[(i, k)])
    }

    fn project_out(&self, h: &Array3<f64>) -> Array2<f64> {
        let (v, _, t) = h.dim();
        let mut y = Array2::from_elem((v, t), self.output_bias);
        for (mut y_v, h_v) in y.axis_iter_mut(Axis(0)).zip(h.axis_iter(Axis(0))) {
            for (w, row) in self.output_proj.iter().zip(h_v.axis_iter(Axis(0))) {
                y_v.scaled_add(*w, &row);
            }
        }
        y
    }

    fn run_layers(&self, prep: &Prepared, mut h: Array3<f64>, start: usize, dropout_seed: Option<u64>) -> ForwardCache {
        let mut caches = Vec::with_capacity(self.layers.len().saturating_sub(start));
        for l in start..self.layers.len() {
            let seed = dropout_seed.map(|s| s ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(l as u64 + 1)));
            let (next, cache) = self.layer_forward(prep, l, h, seed, true);
            caches.push(cache.expect("recorded"));
            h = next;
        }
        ForwardCache { x: None, start, layers: caches, last: h }
    }

    fn layer_forward(
        &self,
        prep: &Prepared,
        l: usize,
        h: Array3<f64>,
        dropout_seed: Option<u64>,
        record: bool,
    ) -> (Array3<f64>, Option<LayerCache>) {
        let layer = &self.layers[l];
        let pl = &prep.layers[l];
        let (v, c, t) = h.dim();
        let h = h.as_standard_layout().into_owned();
        let mut pre_act = Array3::<f64>::zeros((v, c, t));
        let spec_len = prep.conv.spectrum_len();
        let mut input_spec = Vec::new();
        let map_of = |ch: usize| if layer.ssm.num_maps() == 1 { 0 } else { ch };
        match prep.mode {
            Mode::Conv => {
                let mut ws = prep.conv.workspace();
                if record {
                    input_spec = vec![Complex64::new(0.0, 0.0); v * c * spec_len];
                }
                let mut u_spec = vec![Complex64::new(0.0, 0.0); spec_len];
                let hs = h.as_slice().expect("standard layout");
                let out = pre_act.as_slice_mut().expect("standard layout");
                for (idx, (u, y)) in hs.chunks_exact(t).zip(out.chunks_exact_mut(t)).enumerate() {
                    prep.conv.spectrum(u, &mut ws, &mut u_spec);
                    if record {
                        input_spec[idx * spec_len..(idx + 1) * spec_len].copy_from_slice(&u_spec);
                    }
                    for (a, k) in u_spec.iter_mut().zip(&pl.spectra[map_of(idx % c)]) {
                        *a *= k;
                    }
                    prep.conv.inverse(&mut u_spec, &mut ws, y);
                }
            }
            Mode::Scan => {
                let hs = h.as_slice().expect("standard layout");
                let out = pre_act.as_slice_mut().expect("standard layout");
                for (idx, (u, y)) in hs.chunks_exact(t).zip(out.chunks_exact_mut(t)).enumerate() {
                    let r = ssm_scan(&pl.discrete[map_of(idx % c)], u).expect("consistent shapes");
                    y.copy_from_slice(&r);
                }
            }
        }
        let act = pre_act.mapv(gelu);
        let (mut z, diffusion) =
            diffusion_forward(&prep.adj, &act, &layer.mix, self.config.diffusion_mode()).expect("shapes checked");
        for mut z_v in z.axis_iter_mut(Axis(0)) {
            for (mut row, b) in z_v.axis_iter_mut(Axis(0)).zip(layer.bias.iter()) {
                row += *b;
            }
        }
        let p = self.config.dropout;
        let keep = match dropout_seed {
            Some(seed) if p > 0.0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let scale = 1.0 / (1.0 - p);
                let mask = Array3::from_shape_simple_fn((v, c, t), || if rng.random::<f64>() < p { 0.0 } else { scale });
                z *= &mask;
                Some(mask)
            }
            _ => None,
        };
        let out = &h + &z;
        let cache = record.then(|| LayerCache { input: h, pre_act, input_spec, diffusion, keep });
        (out, cache)
    }

    pub fn backward_seq(&self, prep: &Prepared, cache: &ForwardCache, g_y: &Array2<f64>, grads: &mut Gradients) -> Result<()> {
        let h = &cache.last;
        if g_y.dim() != (h.dim().0, h.dim().2) {
            return Err(invalid("output gradient shape mismatch"));
        }
        let (v, c, t) = h.dim();
        grads.params.output_bias += g_y.sum();
        let mut g_h = Array3::<f64>::zeros((v, c, t));
        for ch in 0..c {
            let w = self.output_proj[ch];
            let h_c = h.index_axis(Axis(1), ch);
            grads.params.output_proj[ch] += (&h_c * g_y).sum();
            g_h.index_axis_mut(Axis(1), ch).scaled_add(w, g_y);
        }
        self.backward_trunk(prep, cache, g_h, grads)
    }

    pub fn backward_cls(&self, prep: &Prepared, cache: &ForwardCache, g_logits: [f64; 2], grads: &mut Gradients) -> Result<()> {
        let head = self.cls_head.as_ref().ok_or_else(|| Error::State("classification head is not initialized".into()))?;
        let g_head = grads.params.cls_head.as_mut().ok_or_else(|| Error::State("gradient has no head".into()))?;
        let f = Self::pooled_features(&cache.last);
        let gl = Array1::from(g_logits.to_vec());
        g_head.b += &gl;
        for (mut row, g) in g_head.w.axis_iter_mut(Axis(0)).zip(gl.iter()) {
            row.scaled_add(*g, &f);
        }
        let g_f = head.w.t().dot(&gl);
        let (v, c, t) = cache.last.dim();
        let g_h = Array3::from_shape_fn((v, c, t), |(i, j, _)| g_f[i * c + j] / t as f64);
        self.backward_trunk(prep, cache, g_h, grads)
    }

    fn backward_trunk(&self, prep: &Prepared, cache: &ForwardCache, mut g_h: Array3<f64>, grads: &mut Gradients) -> Result<()> {
        if prep.mode != Mode::Conv {
            return Err(Error::State("gradients are only available in convolution mode".into()));
        }
        let spec_len = prep.conv.spectrum_len();
        let mut ws = prep.conv.workspace();
        let mut g_spec = vec![Complex64::new(0.0, 0.0); spec_len];
        let mut tmp = vec![Complex64::new(0.0, 0.0); spec_len];
        for (offset, lc) in cache.layers.iter().enumerate().rev() {
            let l = cache.start + offset;
            let layer = &self.layers[l];
            let pl = &prep.layers[l];
            let gl = &mut grads.params.layers[l];
            let (v, c, t) = lc.input.dim();
            let mut g_z = g_h.clone();
            if let Some(keep) = &lc.keep {
                g_z *= keep;
            }
            for z_v in g_z.axis_iter(Axis(0)) {
                for (b, row) in gl.bias.iter_mut().zip(z_v.axis_iter(Axis(0))) {
                    *b += row.sum();
                }
            }
            let dg = diffusion_backward(&prep.adj, &layer.mix, self.config.diffusion_mode(), &lc.diffusion, &g_z);
            for (acc, g) in gl.mix.0.iter_mut().zip(&dg.weights) {
                *acc += g;
            }
            grads.adjacency += &dg.adjacency;
            let mut g_s = dg.x;
            Zip::from(&mut g_s).and(&lc.pre_act).for_each(|g, &s| *g *= gelu_grad(s));
            let g_s = g_s.as_standard_layout().into_owned();
            let gs = g_s.as_slice().expect("standard layout");
            let gh = g_h.as_slice_mut().expect("standard layout");
            let multi = layer.ssm.num_maps() > 1;
            let mut g_u = vec![0.0; t];
            for (idx, (g, out)) in gs.chunks_exact(t).zip(gh.chunks_exact_mut(t)).enumerate() {
                let map = if multi { idx % c } else { 0 };
                prep.conv.spectrum(g, &mut ws, &mut g_spec);
                let u_spec = &lc.input_spec[idx * spec_len..(idx + 1) * spec_len];
                for ((a, u), gs) in grads.kernel_spec[l][map].iter_mut().zip(u_spec).zip(&g_spec) {
                    *a += u.conj() * gs;
                }
                for ((o, gs), k) in tmp.iter_mut().zip(&g_spec).zip(&pl.spectra[map]) {
                    *o = gs * k.conj();
                }
                prep.conv.inverse(&mut tmp, &mut ws, &mut g_u);
                for (o, gu) in out.iter_mut().zip(&g_u) {
                    *o += gu;
                }
            }
            debug_assert_eq!(g_h.dim(), (v, c, t));
        }
        if cache.start == 0 {
            if let Some(x) = &cache.x {
                for (ch, g) in grads.params.input_proj.iter_mut().enumerate() {
                    *g += (&g_h.index_axis(Axis(1), ch) * x).sum();
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> GraphS4Model {
        let cfg = ModelConfig { num_layers: 2, state_dim: 8, channels: 2, diffusion_steps: 1, num_nodes: 4, emb_dim: 3, ..Default::default() };
        GraphS4Model::init(&cfg, 3).unwrap()
    }

    fn signal(v: usize, t: usize) -> Array2<f64> {
        Array2::from_shape_fn((v, t), |(i, j)| ((i * 7 + j * 3) as f64 * 0.37).sin())
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let m = small();
        let y = m.forward_seq(&Array2::zeros((4, 16)), Mode::Conv).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_and_scan_agree() {
        let m = small();
        let x = signal(4, 40);
        let a = m.forward_seq(&x, Mode::Conv).unwrap();
        let b = m.forward_seq(&x, Mode::Scan).unwrap();
        let err = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn zero_mixing_makes_blocks_identity() {
        let mut m = small();
        for layer in &mut m.layers {
            layer.mix.0.iter_mut().for_each(|w| w.fill(0.0));
        }
        let x = signal(4, 16);
        let y = m.forward_seq(&x, Mode::Conv).unwrap();
        let gain: f64 = m.input_proj.iter().zip(&m.output_proj).map(|(a, b)| a * b).sum();
        for (a, b) in y.iter().zip(&x) {
            assert!((a - gain * b).abs() < 1e-12);
        }
    }

    #[test]
    fn short_or_bad_input_rejected() {
        let m = small();
        assert!(m.forward_seq(&Array2::zeros((4, 7)), Mode::Conv).is_err());
        assert!(m.forward_seq(&Array2::zeros((3, 16)), Mode::Conv).is_err());
        let mut x = Array2::zeros((4, 16));
        x[(0, 0)] = f64::NAN;
        assert!(m.forward_seq(&x, Mode::Conv).is_err());
    }

    #[test]
    fn missing_head_is_state_error() {
        let m = small();
        assert!(matches!(m.forward_cls(&signal(4, 16)), Err(Error::State(_))));
    }

    #[test]
    fn zero_head_returns_bias() {
        let mut m = small();
        m.init_cls_head(0);
        let head = m.cls_head.as_mut().unwrap();
        head.w.fill(0.0);
        head.b = Array1::from(vec![0.3, -1.2]);
        assert_eq!(m.forward_cls(&signal(4, 16)).unwrap(), [0.3, -1.2]);
    }
}
