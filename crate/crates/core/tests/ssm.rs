use graphs4::ssm_core::{
    causal_conv, complex_eigenvalues, discretize_bilinear, hippo_legs_init, kernel_fast, kernel_naive, ssm_scan, DiscreteSsm, DplrParams, Kernel,
};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_max_error(fast: &[f64], naive: &[f64]) -> f64 {
    let scale = naive.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = fast.iter().zip(naive).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / scale
}

fn direct_conv(k: &[f64], u: &[f64]) -> Vec<f64> {
    (0..u.len()).map(|t| (0..=t).map(|i| k[i] * u[t - i]).sum()).collect()
}

fn cplx(rng: &mut ChaCha8Rng) -> Complex64 {
    Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
}

/// Dense random system rescaled to spectral radius `radius`.
fn random_discrete(n: usize, radius: f64, rng: &mut ChaCha8Rng) -> DiscreteSsm {
    let a = DMatrix::from_fn(n, n, |_, _| cplx(rng));
    let rho = complex_eigenvalues(a.clone()).iter().map(|z| z.norm()).fold(0.0, f64::max);
    let a = a.map(|z| z * (radius / rho));
    DiscreteSsm::new(a, DVector::from_fn(n, |_, _| cplx(rng)), DVector::from_fn(n, |_, _| cplx(rng))).unwrap()
}

#[test]
fn fast_kernel_matches_naive_at_full_state_size() {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let params = hippo_legs_init(64, seed).unwrap();
        let naive = kernel_naive(&discretize_bilinear(&params).unwrap(), 512).unwrap();
        let fast = kernel_fast(&params, 512).unwrap();
        worst = worst.max(rel_max_error(&fast.0, &naive.0));
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn fast_kernel_with_perturbed_spectrum() {
    // Non-HiPPO spectra: jittered eigenvalues and a random low-rank term.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..5 {
        let base = hippo_legs_init(32, seed).unwrap();
        let lambda: Vec<Complex64> =
            base.lambda.iter().map(|l| Complex64::new(l.re * rng.random_range(0.5..2.0), l.im + rng.random_range(-3.0..3.0))).collect();
        let p: Vec<Complex64> = (0..32).map(|_| cplx(&mut rng) * 0.1).collect();
        let params = DplrParams::new(lambda, p.clone(), p, base.b.clone(), base.c.clone(), base.log_dt).unwrap();
        assert!(params.is_stable());
        for l in [64, 256, 1000] {
            let naive = kernel_naive(&discretize_bilinear(&params).unwrap(), l).unwrap();
            let fast = kernel_fast(&params, l).unwrap();
            assert_eq!(fast.len(), l);
            assert!(rel_max_error(&fast.0, &naive.0) < 1e-4);
        }
    }
}

#[test]
fn hippo_kernels_decay_and_discretization_is_contractive() {
    for seed in 0..5 {
        let params = hippo_legs_init(16, seed).unwrap();
        let d = discretize_bilinear(&params).unwrap();
        assert!(d.spectral_radius() < 1.0);
        let k = kernel_fast(&params, 256).unwrap();
        assert!(k.0.iter().all(|v| v.is_finite()));
        assert!(k.0[255].abs() < k.0[0].abs());
    }
}

#[test]
fn scan_matches_convolution_of_naive_kernel_over_50_seeds() {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=16);
        let l = rng.random_range(1..=256);
        let d = random_discrete(n, rng.random_range(0.1..0.99), &mut rng);
        let u: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scan = ssm_scan(&d, &u).unwrap();
        let conv = causal_conv(&kernel_naive(&d, l).unwrap(), &u).unwrap();
        worst = scan.iter().zip(&conv).fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    assert!(worst < 1e-6, "worst abs error {worst:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fft_convolution_matches_direct_sum(k in prop::collection::vec(-2.0f64..2.0, 1..200), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..k.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let fast = causal_conv(&Kernel(k.clone()), &u).unwrap();
        let direct = direct_conv(&k, &u);
        for (a, b) in fast.iter().zip(&direct) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn convolution_is_linear(len in 1usize..128, alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || (0..len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (k, u1, u2) = (Kernel(draw()), draw(), draw());
        let mixed: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| alpha * a + beta * b).collect();
        let lhs = causal_conv(&k, &mixed).unwrap();
        let (y1, y2) = (causal_conv(&k, &u1).unwrap(), causal_conv(&k, &u2).unwrap());
        for t in 0..len {
            prop_assert!((lhs[t] - (alpha * y1[t] + beta * y2[t])).abs() < 1e-9);
        }
    }

    #[test]
    fn convolution_is_causal(len in 2usize..100, cut in 0usize..99, seed in 0u64..1000) {
        let cut = cut % len;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = Kernel((0..len).map(|_| rng.random_range(-1.0..1.0)).collect());
        let u: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut v = u.clone();
        for x in &mut v[cut + 1..] {
            *x += 5.0;
        }
        let (a, b) = (causal_conv(&k, &u).unwrap(), causal_conv(&k, &v).unwrap());
        for t in 0..=cut {
            prop_assert!((a[t] - b[t]).abs() < 1e-9);
        }
    }
}

#[test]
fn scan_examples() {
    let d = DiscreteSsm::scalar(0.5, 1.0, 1.0);
    assert_eq!(ssm_scan(&d, &[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.5, 0.25]);
    assert_eq!(ssm_scan(&d, &[0.0; 5]).unwrap(), vec![0.0; 5]);
    let nil = DiscreteSsm::scalar(0.0, 2.0, 1.5);
    assert_eq!(kernel_naive(&nil, 4).unwrap().0, vec![3.0, 0.0, 0.0, 0.0]);
}
