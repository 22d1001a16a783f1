use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};

pub const LOG_DT_MIN: f64 = -6.907_755_278_982_137; // ln(1e-3)
pub const LOG_DT_MAX: f64 = -2.302_585_092_994_045_7; // ln(1e-1)

/// Continuous-time SSM with a diagonal-plus-low-rank state matrix
/// `A = diag(lambda) - p q^H`, input map `b`, output map `c` and a step size
/// stored in log space.
#[derive(Clone, Debug, PartialEq)]
pub struct DplrParams {
    pub lambda: Vec<Complex64>,
    pub p: Vec<Complex64>,
    pub q: Vec<Complex64>,
    pub b: Vec<Complex64>,
    pub c: Vec<Complex64>,
    pub log_dt: f64,
}

impl DplrParams {
    pub fn new(
        lambda: Vec<Complex64>,
        p: Vec<Complex64>,
        q: Vec<Complex64>,
        b: Vec<Complex64>,
        c: Vec<Complex64>,
        log_dt: f64,
    ) -> Result<Self> {
        let params = Self { lambda, p, q, b, c, log_dt };
        params.validate_shapes()?;
        Ok(params)
    }

    /// Purely diagonal system (`p = q = 0`).
    pub fn diagonal(lambda: Vec<Complex64>, b: Vec<Complex64>, c: Vec<Complex64>, log_dt: f64) -> Result<Self> {
        let n = lambda.len();
        let zeros = vec![Complex64::new(0.0, 0.0); n];
        Self::new(lambda, zeros.clone(), zeros, b, c, log_dt)
    }

    pub fn validate_shapes(&self) -> Result<()> {
        let n = self.lambda.len();
        if n == 0 {
            return Err(invalid("state dimension must be positive"));
        }
        for (name, v) in [("p", &self.p), ("q", &self.q), ("b", &self.b), ("c", &self.c)] {
            if v.len() != n {
                return Err(invalid(format!("{name} has length {} but lambda has length {n}", v.len())));
            }
        }
        if self.log_dt.is_nan() {
            return Err(invalid("log_dt is NaN"));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.lambda.len()
    }

    pub fn dt(&self) -> f64 {
        self.log_dt.exp()
    }

    /// Dense reconstruction of `A = diag(lambda) - p q^H`.
    pub fn dense_a(&self) -> DMatrix<Complex64> {
        dense_dplr(&self.lambda, &self.p, &self.q)
    }

    /// Eigenvalues of the reconstructed dense `A`, via a complex Schur form.
    pub fn eigenvalues(&self) -> Vec<Complex64> {
        complex_eigenvalues(self.dense_a())
    }

    /// Largest real part over the eigenvalues of `A`.
    pub fn max_eig_real(&self) -> f64 {
        self.eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_stable(&self) -> bool {
        self.max_eig_real() < 0.0
    }
}

pub(crate) fn dense_dplr(lambda: &[Complex64], p: &[Complex64], q: &[Complex64]) -> DMatrix<Complex64> {
    let n = lambda.len();
    DMatrix::from_fn(n, n, |i, j| {
        let diag = if i == j { lambda[i] } else { Complex64::new(0.0, 0.0) };
        diag - p[i] * q[j].conj()
    })
}

pub fn complex_eigenvalues(m: DMatrix<Complex64>) -> Vec<Complex64> {
    let n = m.nrows();
    let schur = nalgebra::Schur::new(m);
    let (_, t) = schur.unpack();
    (0..n).map(|i| t[(i, i)]).collect()
}

/// Dense HiPPO-LegS matrix: `-sqrt(2n+1) sqrt(2k+1)` below the diagonal,
/// `-(n+1)` on it, zero above.
pub fn hippo_legs_matrix(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, k| {
        if i > k {
            -((2 * i + 1) as f64).sqrt() * ((2 * k + 1) as f64).sqrt()
        } else if i == k {
            -((i + 1) as f64)
        } else {
            0.0
        }
    })
}

/// Normal-plus-low-rank split of LegS, `A = V (diag(lambda) - p p^H) V^H`.
#[derive(Clone, Debug)]
pub struct LegsDecomposition {
    pub lambda: Vec<Complex64>,
    /// Low-rank factor expressed in the eigenbasis.
    pub p: Vec<Complex64>,
    /// Unitary eigenbasis of the normal part (columns).
    pub basis: DMatrix<Complex64>,
}

impl LegsDecomposition {
    /// Maps a vector from the original basis into the eigenbasis (`V^H x`).
    pub fn to_eigenbasis(&self, x: &[Complex64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|j| (0..n).map(|i| self.basis[(i, j)].conj() * x[i]).sum())
            .collect()
    }

    /// `V M V^H` for a matrix `M` given in the eigenbasis.
    pub fn from_eigenbasis(&self, m: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        &self.basis * m * self.basis.adjoint()
    }
}

pub fn hippo_legs_decomposition(n: usize) -> Result<LegsDecomposition> {
    if n == 0 {
        return Err(invalid("HiPPO state dimension must be positive"));
    }
    let a = hippo_legs_matrix(n);
    let p_real: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5).sqrt()).collect();
    // A + p p^T = -I/2 + S with S skew-symmetric; i*S is Hermitian.
    let herm = DMatrix::from_fn(n, n, |i, k| {
        let mut s = a[(i, k)] + p_real[i] * p_real[k];
        if i == k {
            s += 0.5;
        }
        Complex64::new(0.0, s)
    });
    let eig = SymmetricEigen::new(herm);
    let lambda: Vec<Complex64> = eig.eigenvalues.iter().map(|&mu| Complex64::new(-0.5, -mu)).collect();
    let basis = eig.eigenvectors;
    let mut decomposition = LegsDecomposition { lambda, p: Vec::new(), basis };
    let p_c: Vec<Complex64> = p_real.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    decomposition.p = decomposition.to_eigenbasis(&p_c);
    Ok(decomposition)
}

/// HiPPO-LegS initialization in DPLR form with `q = p`.
///
/// `b` is the all-ones vector mapped into the eigenbasis, `c` a circular
/// complex Gaussian scaled by `1/sqrt(n)` and `log_dt` uniform on
/// `[ln 1e-3, ln 1e-1]`.
pub fn hippo_legs_init(n: usize, seed: u64) -> Result<DplrParams> {
    let decomposition = hippo_legs_decomposition(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ones = vec![Complex64::new(1.0, 0.0); n];
    let b = decomposition.to_eigenbasis(&ones);
    let c = random_output_map(&mut rng, n);
    let log_dt = rng.random_range(LOG_DT_MIN..LOG_DT_MAX);
    let p = decomposition.p.clone();
    DplrParams::new(decomposition.lambda, p.clone(), p, b, c, log_dt)
}

pub(crate) fn random_output_map<R: Rng>(rng: &mut R, n: usize) -> Vec<Complex64> {
    let normal = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("valid normal");
    let scale = 1.0 / (n as f64).sqrt();
    (0..n)
        .map(|_| Complex64::new(normal.sample(rng), normal.sample(rng)) * scale)
        .collect()
}
