use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

use super::params::DplrParams;
use super::Kernel;
use crate::error::{invalid, Error, Result};

/// Borrowed view of the parts of a DPLR system shared by several output maps.
#[derive(Clone, Copy, Debug)]
pub struct DplrView<'a> {
    pub lambda: &'a [Complex64],
    pub p: &'a [Complex64],
    pub q: &'a [Complex64],
    pub b: &'a [Complex64],
    pub log_dt: f64,
}

impl<'a> From<&'a DplrParams> for DplrView<'a> {
    fn from(params: &'a DplrParams) -> Self {
        Self { lambda: &params.lambda, p: &params.p, q: &params.q, b: &params.b, log_dt: params.log_dt }
    }
}

/// Structured kernel computation: evaluates the truncated generating function
/// at the roots of unity with Cauchy sums plus a rank-one Woodbury correction,
/// then inverts with one FFT.
pub fn kernel_fast(params: &DplrParams, l: usize) -> Result<Kernel> {
    params.validate_shapes()?;
    let mut ks = kernel_fast_multi(DplrView::from(params), &[params.c.as_slice()], l)?;
    Ok(Kernel(ks.pop().expect("one output requested")))
}

/// [`kernel_fast`] for several output maps sharing `lambda, p, q, b, dt`.
pub fn kernel_fast_multi(sys: DplrView<'_>, outputs: &[&[Complex64]], l: usize) -> Result<Vec<Vec<f64>>> {
    if l == 0 {
        return Err(invalid("kernel length must be positive"));
    }
    let n = sys.lambda.len();
    if outputs.iter().any(|c| c.len() != n) {
        return Err(invalid("output map length differs from state dimension"));
    }
    let lp = l.next_power_of_two();
    let dt = sys.log_dt.exp();
    let s = dt / 2.0;
    let one = Complex64::new(1.0, 0.0);

    // Truncation correction c~^T = c^T (I - A_bar^L), applying A_bar from the
    // right in O(N) per step.
    let step = RightStep::new(sys, s)?;
    let c_tilde: Vec<Vec<Complex64>> = outputs
        .iter()
        .map(|c| {
            let mut r = c.to_vec();
            let mut t = vec![Complex64::new(0.0, 0.0); n];
            for _ in 0..lp {
                step.apply(&mut r, &mut t);
            }
            c.iter().zip(&r).map(|(c, r)| c - r).collect()
        })
        .collect();

    // Weights of the four Cauchy sums; the first two are shared by all outputs.
    let mut weights: Vec<Vec<Complex64>> = vec![
        sys.q.iter().zip(sys.b).map(|(q, b)| q.conj() * b).collect(),
        sys.q.iter().zip(sys.p).map(|(q, p)| q.conj() * p).collect(),
    ];
    for c in &c_tilde {
        weights.push(c.iter().zip(sys.b).map(|(c, b)| c * b).collect());
        weights.push(c.iter().zip(sys.p).map(|(c, p)| c * p).collect());
    }

    // 1 / (alpha - beta lambda) = 1 / ((1 - s lambda) - z (1 + s lambda)),
    // accumulated state by state over all frequencies at once.
    let (z_re, z_im): (Vec<f64>, Vec<f64>) = (0..lp).map(|j| root_of_unity(j, lp)).map(|z| (z.re, z.im)).unzip();
    let mut acc_re = vec![vec![0.0; lp]; weights.len()];
    let mut acc_im = vec![vec![0.0; lp]; weights.len()];
    let mut inv_re = vec![0.0; lp];
    let mut inv_im = vec![0.0; lp];
    for (i, lam) in sys.lambda.iter().enumerate() {
        let a = one - lam * s;
        let c = one + lam * s;
        for j in 0..lp {
            let w_re = a.re - (z_re[j] * c.re - z_im[j] * c.im);
            let w_im = a.im - (z_re[j] * c.im + z_im[j] * c.re);
            let scale = 1.0 / (w_re * w_re + w_im * w_im);
            inv_re[j] = w_re * scale;
            inv_im[j] = -w_im * scale;
        }
        for (k, w) in weights.iter().enumerate() {
            let (w_re, w_im) = (w[i].re, w[i].im);
            for ((re, im), (ir, ii)) in acc_re[k].iter_mut().zip(acc_im[k].iter_mut()).zip(inv_re.iter().zip(&inv_im)) {
                *re += w_re * ir - w_im * ii;
                *im += w_re * ii + w_im * ir;
            }
        }
    }

    let sum = |k: usize, j: usize| Complex64::new(acc_re[k][j], acc_im[k][j]);
    let mut spectra = vec![vec![Complex64::new(0.0, 0.0); lp]; outputs.len()];
    for j in 0..lp {
        let beta = (one + Complex64::new(z_re[j], z_im[j])) * s;
        let (k10, k11) = (sum(0, j), sum(1, j));
        let woodbury = beta / (one + beta * k11);
        if !woodbury.re.is_finite() || !woodbury.im.is_finite() {
            return Err(Error::NumericSingularity("Woodbury correction is singular".into()));
        }
        for (o, spec) in spectra.iter_mut().enumerate() {
            let (k00, k01) = (sum(2 + 2 * o, j), sum(3 + 2 * o, j));
            spec[j] = (k00 - woodbury * k01 * k10) * dt;
        }
    }
    if spectra.iter().flatten().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NumericSingularity("resolvent is singular on the unit circle".into()));
    }

    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(lp);
    let scale = 1.0 / lp as f64;
    Ok(spectra
        .into_iter()
        .map(|mut spec| {
            ifft.process(&mut spec);
            spec.iter().take(l).map(|z| z.re * scale).collect()
        })
        .collect())
}

/// `r^T <- r^T A_bar` with `A_bar = 2 (I - s A)^-1 - I` and
/// `I - s A = D + s p q^*`, inverted by Woodbury.
struct RightStep<'a> {
    d: Vec<Complex64>,
    u: Vec<Complex64>,
    p: &'a [Complex64],
}

impl<'a> RightStep<'a> {
    fn new(sys: DplrView<'a>, s: f64) -> Result<Self> {
        let one = Complex64::new(1.0, 0.0);
        let d: Vec<Complex64> = sys.lambda.iter().map(|l| (one - l * s).inv()).collect();
        let gamma = one + sys.q.iter().zip(&d).zip(sys.p).map(|((q, d), p)| q.conj() * d * p).sum::<Complex64>() * s;
        let u: Vec<Complex64> = sys.q.iter().zip(&d).map(|(q, d)| q.conj() * d * s / gamma).collect();
        if d.iter().chain(&u).any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NumericSingularity("I - dt/2 A is not invertible".into()));
        }
        Ok(Self { d, u, p: sys.p })
    }

    fn apply(&self, r: &mut [Complex64], t: &mut [Complex64]) {
        let mut alpha = Complex64::new(0.0, 0.0);
        for ((t, r), (d, p)) in t.iter_mut().zip(r.iter()).zip(self.d.iter().zip(self.p)) {
            *t = r * d;
            alpha += *t * p;
        }
        for ((r, t), u) in r.iter_mut().zip(t.iter()).zip(&self.u) {
            *r = (t - alpha * u) * 2.0 - *r;
        }
    }
}

/// `exp(-2 pi i j / n)` with the quarter-turn points returned exactly.
fn root_of_unity(j: usize, n: usize) -> Complex64 {
    if (4 * j) % n == 0 {
        return match (4 * j) / n {
            0 => Complex64::new(1.0, 0.0),
            1 => Complex64::new(0.0, -1.0),
            2 => Complex64::new(-1.0, 0.0),
            _ => Complex64::new(0.0, 1.0),
        };
    }
    let theta = -2.0 * PI * j as f64 / n as f64;
    Complex64::new(theta.cos(), theta.sin())
}
