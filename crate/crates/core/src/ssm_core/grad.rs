use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::discrete::{matvec, unrolled_states};
use super::kernel::DplrView;
use super::params::dense_dplr;
use crate::error::{invalid, Error, Result};

/// Gradients of a scalar loss with respect to the DPLR parameters of a kernel.
///
/// Complex entries hold `dL/dRe + i dL/dIm`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelGrads {
    pub lambda: Vec<Complex64>,
    pub p: Vec<Complex64>,
    pub q: Vec<Complex64>,
    pub b: Vec<Complex64>,
    pub c: Vec<Vec<Complex64>>,
    pub log_dt: f64,
}

fn re_inner(x: &DMatrix<Complex64>, y: &DMatrix<Complex64>) -> f64 {
    x.iter().zip(y.iter()).map(|(a, b)| (a.conj() * b).re).sum()
}

/// Reverse-mode gradient of the kernel map `(params, c_ch) -> k_ch`, given
/// `dL/dk_ch` for every output map.
///
/// The kernel is differentiated through its unrolled definition
/// `k[i] = Re(c A_bar^i B_bar)` and the bilinear discretization; this is the
/// same function the structured path evaluates.
pub fn kernel_backward(
    sys: DplrView<'_>,
    outputs: &[&[Complex64]],
    l: usize,
    grad_k: &[&[f64]],
) -> Result<KernelGrads> {
    let n = sys.lambda.len();
    if outputs.len() != grad_k.len() || grad_k.iter().any(|g| g.len() != l) || l == 0 {
        return Err(invalid("kernel gradient shapes do not match outputs"));
    }
    let dt = sys.log_dt.exp();
    let h = Complex64::new(dt / 2.0, 0.0);
    let eye = DMatrix::<Complex64>::identity(n, n);
    let a = dense_dplr(sys.lambda, sys.p, sys.q);
    let m = &eye - &a * h;
    let m_inv = m
        .try_inverse()
        .ok_or_else(|| Error::NumericSingularity("I - dt/2 A is not invertible".into()))?;
    let fwd = &eye + &a * h;
    let a_bar = &m_inv * &fwd;
    let b = DVector::from_column_slice(sys.b);
    let m_inv_b = &m_inv * &b;
    let b_bar: Vec<Complex64> = m_inv_b.iter().map(|v| v * dt).collect();

    let states = unrolled_states(&a_bar, &b_bar, l);

    let grad_c: Vec<Vec<Complex64>> = grad_k
        .iter()
        .map(|g| {
            let mut acc = vec![Complex64::new(0.0, 0.0); n];
            for (gi, x) in g.iter().zip(states.chunks_exact(n)) {
                for (a, xi) in acc.iter_mut().zip(x) {
                    *a += xi.conj() * *gi;
                }
            }
            acc
        })
        .collect();

    // Direct contribution of tap i to the state adjoint.
    let direct = |i: usize, out: &mut [Complex64]| {
        out.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        for (c, g) in outputs.iter().zip(grad_k) {
            for (o, cj) in out.iter_mut().zip(c.iter()) {
                *o += cj.conj() * g[i];
            }
        }
    };

    let a_bar_h = a_bar.adjoint();
    let mut adj = vec![Complex64::new(0.0, 0.0); l * n];
    direct(l - 1, &mut adj[(l - 1) * n..]);
    let mut tmp = vec![Complex64::new(0.0, 0.0); n];
    let mut dir = vec![Complex64::new(0.0, 0.0); n];
    for i in (1..l).rev() {
        matvec(&a_bar_h, &adj[i * n..(i + 1) * n], &mut tmp);
        direct(i - 1, &mut dir);
        for ((o, t), d) in adj[(i - 1) * n..i * n].iter_mut().zip(&tmp).zip(&dir) {
            *o = t + d;
        }
    }

    // G_Abar = sum_{i>=1} r_i x_{i-1}^H
    let g_a_bar = if l > 1 {
        let r = DMatrix::from_column_slice(n, l - 1, &adj[n..]);
        let x = DMatrix::from_column_slice(n, l - 1, &states[..(l - 1) * n]);
        r * x.adjoint()
    } else {
        DMatrix::zeros(n, n)
    };
    let g_b_bar = DVector::from_column_slice(&adj[..n]);

    let m_inv_h = m_inv.adjoint();
    // A_bar = Minv * fwd
    let mut g_m_inv = &g_a_bar * fwd.adjoint();
    let g_fwd = &m_inv_h * &g_a_bar;
    // B_bar = dt * Minv * b
    g_m_inv += (&g_b_bar * b.adjoint()) * Complex64::new(dt, 0.0);
    let g_b = (&m_inv_h * &g_b_bar) * Complex64::new(dt, 0.0);
    let mut d_dt: f64 = g_b_bar.iter().zip(m_inv_b.iter()).map(|(g, v)| (g.conj() * v).re).sum();
    // Minv = M^-1
    let g_m = -(&m_inv_h * &g_m_inv * &m_inv_h);
    // fwd = I + h A, M = I - h A
    let g_a = &g_fwd * h - &g_m * h;
    let d_h = re_inner(&g_fwd, &a) - re_inner(&g_m, &a);
    d_dt += d_h / 2.0;

    let q = DVector::from_column_slice(sys.q);
    let p = DVector::from_column_slice(sys.p);
    let g_p = -(&g_a * &q);
    let g_q = -(g_a.adjoint() * &p);

    Ok(KernelGrads {
        lambda: (0..n).map(|i| g_a[(i, i)]).collect(),
        p: g_p.iter().copied().collect(),
        q: g_q.iter().copied().collect(),
        b: g_b.iter().copied().collect(),
        c: grad_c,
        log_dt: d_dt * dt,
    })
}
