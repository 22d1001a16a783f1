use std::sync::Arc;

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use super::Kernel;
use crate::error::{invalid, Result};

/// Planned causal convolution for sequences of a fixed length `L`.
///
/// Signals are zero padded to a power of two `M >= 2L` so circular
/// convolution and correlation coincide with their linear counterparts on
/// the first `L` outputs.
#[derive(Clone)]
pub struct FftConv {
    len: usize,
    fft_len: usize,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
}

impl std::fmt::Debug for FftConv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftConv").field("len", &self.len).field("fft_len", &self.fft_len).finish()
    }
}

/// Reusable buffers for one thread of [`FftConv`] work.
pub struct ConvWorkspace {
    time: Vec<f64>,
    freq: Vec<Complex64>,
    scratch_fwd: Vec<Complex64>,
    scratch_inv: Vec<Complex64>,
}

impl FftConv {
    pub fn new(len: usize) -> Self {
        let fft_len = (2 * len.max(1)).next_power_of_two();
        let mut planner = RealFftPlanner::<f64>::new();
        let r2c = planner.plan_fft_forward(fft_len);
        let c2r = planner.plan_fft_inverse(fft_len);
        Self { len, fft_len, r2c, c2r }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn spectrum_len(&self) -> usize {
        self.fft_len / 2 + 1
    }

    pub fn workspace(&self) -> ConvWorkspace {
        ConvWorkspace {
            time: vec![0.0; self.fft_len],
            freq: vec![Complex64::new(0.0, 0.0); self.spectrum_len()],
            scratch_fwd: self.r2c.make_scratch_vec(),
            scratch_inv: self.c2r.make_scratch_vec(),
        }
    }

    /// Spectrum of `x` zero padded to the FFT length. `x` may be shorter than `L`.
    pub fn spectrum(&self, x: &[f64], ws: &mut ConvWorkspace, out: &mut [Complex64]) {
        debug_assert!(x.len() <= self.len && out.len() == self.spectrum_len());
        ws.time[..x.len()].copy_from_slice(x);
        ws.time[x.len()..].iter_mut().for_each(|v| *v = 0.0);
        self.r2c
            .process_with_scratch(&mut ws.time, out, &mut ws.scratch_fwd)
            .expect("forward FFT buffer sizes are fixed by construction");
    }

    pub fn spectrum_vec(&self, x: &[f64], ws: &mut ConvWorkspace) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.spectrum_len()];
        self.spectrum(x, ws, &mut out);
        out
    }

    /// Inverse transform of `spec` (consumed as scratch), keeping the first
    /// `out.len()` samples and applying the `1/M` normalization.
    pub fn inverse(&self, spec: &mut [Complex64], ws: &mut ConvWorkspace, out: &mut [f64]) {
        let last = spec.len() - 1;
        spec[0].im = 0.0;
        spec[last].im = 0.0;
        self.c2r
            .process_with_scratch(spec, &mut ws.time, &mut ws.scratch_inv)
            .expect("inverse FFT buffer sizes are fixed by construction");
        let scale = 1.0 / self.fft_len as f64;
        for (o, t) in out.iter_mut().zip(&ws.time) {
            *o = t * scale;
        }
    }

    /// `y = k * u` given the kernel spectrum.
    pub fn convolve_spectrum(&self, k_spec: &[Complex64], u: &[f64], ws: &mut ConvWorkspace, out: &mut [f64]) {
        let mut freq = std::mem::take(&mut ws.freq);
        self.spectrum(u, ws, &mut freq);
        for (f, k) in freq.iter_mut().zip(k_spec) {
            *f *= k;
        }
        self.inverse(&mut freq, ws, out);
        ws.freq = freq;
    }

    /// Gradient with respect to the input of `y = k * u`:
    /// `g_u[t] = sum_{s >= t} k[s - t] g_y[s]`.
    pub fn correlate_spectrum(&self, k_spec: &[Complex64], g_y: &[f64], ws: &mut ConvWorkspace, out: &mut [f64]) {
        let mut freq = std::mem::take(&mut ws.freq);
        self.spectrum(g_y, ws, &mut freq);
        for (f, k) in freq.iter_mut().zip(k_spec) {
            *f *= k.conj();
        }
        self.inverse(&mut freq, ws, out);
        ws.freq = freq;
    }
}

/// Adds `conj(u_spec) * g_spec` into `acc`; inverse transforming the sum gives
/// the kernel gradient `g_k[i] = sum_t u[t - i] g_y[t]`.
pub fn accumulate_kernel_grad(acc: &mut [Complex64], u_spec: &[Complex64], g_spec: &[Complex64]) {
    for ((a, u), g) in acc.iter_mut().zip(u_spec).zip(g_spec) {
        *a += u.conj() * g;
    }
}

/// Causal convolution `y[t] = sum_{i<=t} k[i] u[t-i]` computed by FFT.
pub fn causal_conv(k: &Kernel, u: &[f64]) -> Result<Vec<f64>> {
    if k.len() != u.len() {
        return Err(invalid(format!("kernel length {} != input length {}", k.len(), u.len())));
    }
    if u.is_empty() {
        return Ok(Vec::new());
    }
    let conv = FftConv::new(u.len());
    let mut ws = conv.workspace();
    let k_spec = conv.spectrum_vec(&k.0, &mut ws);
    let mut y = vec![0.0; u.len()];
    conv.convolve_spectrum(&k_spec, u, &mut ws, &mut y);
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct(k: &[f64], u: &[f64]) -> Vec<f64> {
        (0..u.len()).map(|t| (0..=t).map(|i| k[i] * u[t - i]).sum()).collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn worked_examples() {
        let k = Kernel(vec![1.0, 0.5, 0.25]);
        assert!(close(&causal_conv(&k, &[1.0, 0.0, 0.0]).unwrap(), &[1.0, 0.5, 0.25], 1e-12));
        assert!(close(&causal_conv(&k, &[1.0, 1.0, 1.0]).unwrap(), &[1.0, 1.5, 1.75], 1e-12));
        assert!(close(&causal_conv(&k, &[0.0; 3]).unwrap(), &[0.0; 3], 1e-15));
        assert!(causal_conv(&k, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn matches_direct_sum() {
        let l = 97;
        let k: Vec<f64> = (0..l).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect();
        let u: Vec<f64> = (0..l).map(|i| ((i * 5 % 11) as f64 - 5.0) / 3.0).collect();
        let y = causal_conv(&Kernel(k.clone()), &u).unwrap();
        assert!(close(&y, &direct(&k, &u), 1e-9));
    }

    #[test]
    fn adjoint_identities() {
        // <k*u, g> == <u, corr(k, g)> == <k, corr(u, g)>
        let l = 40;
        let k: Vec<f64> = (0..l).map(|i| (i as f64 * 0.37).sin()).collect();
        let u: Vec<f64> = (0..l).map(|i| (i as f64 * 0.11).cos()).collect();
        let g: Vec<f64> = (0..l).map(|i| (i as f64 * 0.23 + 1.0).sin()).collect();
        let conv = FftConv::new(l);
        let mut ws = conv.workspace();
        let k_spec = conv.spectrum_vec(&k, &mut ws);
        let u_spec = conv.spectrum_vec(&u, &mut ws);
        let g_spec = conv.spectrum_vec(&g, &mut ws);
        let y = direct(&k, &u);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();

        let mut gu = vec![0.0; l];
        conv.correlate_spectrum(&k_spec, &g, &mut ws, &mut gu);
        let mid: f64 = u.iter().zip(&gu).map(|(a, b)| a * b).sum();

        let mut acc = vec![Complex64::new(0.0, 0.0); conv.spectrum_len()];
        accumulate_kernel_grad(&mut acc, &u_spec, &g_spec);
        let mut gk = vec![0.0; l];
        conv.inverse(&mut acc, &mut ws, &mut gk);
        let rhs: f64 = k.iter().zip(&gk).map(|(a, b)| a * b).sum();

        assert!((lhs - mid).abs() < 1e-10);
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
