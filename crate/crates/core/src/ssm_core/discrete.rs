use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::params::DplrParams;
use super::Kernel;
use crate::error::{invalid, Error, Result};

/// Bilinear-discretized SSM: `z_k = a_bar z_{k-1} + b_bar u_k`, `y_k = Re(c_bar . z_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: DMatrix<Complex64>,
    pub b_bar: DVector<Complex64>,
    pub c_bar: DVector<Complex64>,
}

impl DiscreteSsm {
    pub fn new(a_bar: DMatrix<Complex64>, b_bar: DVector<Complex64>, c_bar: DVector<Complex64>) -> Result<Self> {
        let n = a_bar.nrows();
        if n == 0 || a_bar.ncols() != n || b_bar.len() != n || c_bar.len() != n {
            return Err(invalid("discrete SSM requires a square N x N a_bar and length-N b_bar, c_bar"));
        }
        Ok(Self { a_bar, b_bar, c_bar })
    }

    /// Scalar system, handy for hand-checked examples.
    pub fn scalar(a_bar: f64, b_bar: f64, c_bar: f64) -> Self {
        let c = |v: f64| Complex64::new(v, 0.0);
        Self {
            a_bar: DMatrix::from_element(1, 1, c(a_bar)),
            b_bar: DVector::from_element(1, c(b_bar)),
            c_bar: DVector::from_element(1, c(c_bar)),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a_bar.nrows()
    }

    pub fn spectral_radius(&self) -> f64 {
        super::params::complex_eigenvalues(self.a_bar.clone())
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }
}

/// `A_bar = (I - dt/2 A)^-1 (I + dt/2 A)`, `B_bar = (I - dt/2 A)^-1 dt B`, `C_bar = C`.
pub fn discretize_bilinear(params: &DplrParams) -> Result<DiscreteSsm> {
    params.validate_shapes()?;
    let n = params.state_dim();
    let dt = params.dt();
    let a = params.dense_a();
    let half = Complex64::new(dt / 2.0, 0.0);
    let eye = DMatrix::<Complex64>::identity(n, n);
    let backward = &eye - &a * half;
    let forward = &eye + &a * half;
    let inv = backward
        .try_inverse()
        .ok_or_else(|| Error::NumericSingularity("I - dt/2 A is not invertible".into()))?;
    if inv.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NumericSingularity("I - dt/2 A is numerically singular".into()));
    }
    let b = DVector::from_vec(params.b.clone());
    let b_bar = &inv * b * Complex64::new(dt, 0.0);
    let a_bar = inv * forward;
    Ok(DiscreteSsm { a_bar, b_bar, c_bar: DVector::from_vec(params.c.clone()) })
}

/// Runs the recurrence from a zero initial state.
pub fn ssm_scan(d: &DiscreteSsm, u: &[f64]) -> Result<Vec<f64>> {
    let n = d.state_dim();
    if d.b_bar.len() != n || d.c_bar.len() != n {
        return Err(invalid("inconsistent discrete SSM shapes"));
    }
    let mut z = vec![Complex64::new(0.0, 0.0); n];
    let mut next = vec![Complex64::new(0.0, 0.0); n];
    let mut y = Vec::with_capacity(u.len());
    for &uk in u {
        matvec(&d.a_bar, &z, &mut next);
        for (acc, bi) in next.iter_mut().zip(d.b_bar.iter()) {
            *acc += bi * uk;
        }
        std::mem::swap(&mut z, &mut next);
        let yk: Complex64 = z.iter().zip(d.c_bar.iter()).map(|(zi, ci)| ci * zi).sum();
        y.push(yk.re);
    }
    Ok(y)
}

/// Reference kernel `k[i] = Re(C_bar A_bar^i B_bar)` by iterated mat-vec products.
pub fn kernel_naive(d: &DiscreteSsm, l: usize) -> Result<Kernel> {
    if l == 0 {
        return Err(invalid("kernel length must be positive"));
    }
    let states = unrolled_states(&d.a_bar, d.b_bar.as_slice(), l);
    let n = d.state_dim();
    let k = states
        .chunks_exact(n)
        .map(|x| x.iter().zip(d.c_bar.iter()).map(|(xi, ci)| ci * xi).sum::<Complex64>().re)
        .collect();
    Ok(Kernel(k))
}

/// `A_bar^i B_bar` for `i = 0..l`, stored row-major as `l x N`.
pub(crate) fn unrolled_states(a_bar: &DMatrix<Complex64>, b_bar: &[Complex64], l: usize) -> Vec<Complex64> {
    let n = b_bar.len();
    let mut out = Vec::with_capacity(l * n);
    let mut cur = b_bar.to_vec();
    let mut next = vec![Complex64::new(0.0, 0.0); n];
    out.extend_from_slice(&cur);
    for _ in 1..l {
        matvec(a_bar, &cur, &mut next);
        out.extend_from_slice(&next);
        std::mem::swap(&mut cur, &mut next);
    }
    out
}

/// `out = m x` for a column-major dense matrix.
pub(crate) fn matvec(m: &DMatrix<Complex64>, x: &[Complex64], out: &mut [Complex64]) {
    let n = m.nrows();
    let a = m.as_slice();
    out.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
    for (j, xj) in x.iter().enumerate() {
        let col = &a[j * n..(j + 1) * n];
        for (acc, aij) in out.iter_mut().zip(col) {
            *acc += aij * xj;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(v: f64) -> Complex64 {
        Complex64::new(v, 0.0)
    }

    fn scalar_params(a: f64, b: f64, dt: f64) -> DplrParams {
        DplrParams::diagonal(vec![c(a)], vec![c(b)], vec![c(1.0)], dt.ln()).unwrap()
    }

    #[test]
    fn bilinear_scalar_examples() {
        let d = discretize_bilinear(&scalar_params(-1.0, 1.0, 2.0)).unwrap();
        assert!(d.a_bar[(0, 0)].norm() < 1e-15);
        assert!((d.b_bar[0] - c(1.0)).norm() < 1e-15);

        let d = discretize_bilinear(&scalar_params(0.0, 2.0, 0.5)).unwrap();
        assert!((d.a_bar[(0, 0)] - c(1.0)).norm() < 1e-15);
        assert!((d.b_bar[0] - c(1.0)).norm() < 1e-15);
    }

    #[test]
    fn zero_step_is_identity() {
        let params = super::super::hippo_legs_init(4, 1).unwrap();
        let params = DplrParams { log_dt: f64::NEG_INFINITY, ..params };
        let d = discretize_bilinear(&params).unwrap();
        let eye = DMatrix::<Complex64>::identity(4, 4);
        assert!((&d.a_bar - eye).norm() < 1e-15);
        assert!(d.b_bar.norm() == 0.0);
    }

    #[test]
    fn singular_backward_matrix_is_reported() {
        // A = 2/dt makes I - dt/2 A singular.
        let params = scalar_params(2.0, 1.0, 1.0);
        assert!(matches!(discretize_bilinear(&params), Err(Error::NumericSingularity(_))));
    }

    #[test]
    fn scan_and_kernel_scalar() {
        let d = DiscreteSsm::scalar(0.5, 1.0, 1.0);
        assert_eq!(ssm_scan(&d, &[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.5, 0.25]);
        assert_eq!(kernel_naive(&d, 3).unwrap().0, vec![1.0, 0.5, 0.25]);
        assert_eq!(ssm_scan(&d, &[0.0; 5]).unwrap(), vec![0.0; 5]);
        assert_eq!(kernel_naive(&d, 1).unwrap().0, vec![1.0]);
        let nil = DiscreteSsm::scalar(0.0, 2.0, 3.0);
        assert_eq!(kernel_naive(&nil, 4).unwrap().0, vec![6.0, 0.0, 0.0, 0.0]);
        assert!(kernel_naive(&d, 0).is_err());
    }

    #[test]
    fn stable_params_map_inside_unit_disc() {
        for seed in 0..4 {
            let params = super::super::hippo_legs_init(32, seed).unwrap();
            let d = discretize_bilinear(&params).unwrap();
            assert!(d.spectral_radius() < 1.0);
        }
    }
}
