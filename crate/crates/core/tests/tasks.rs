use std::collections::BTreeMap;

use graphs4::dataio::{Label, Sample, Split};
use graphs4::evalx::anomaly_score;
use graphs4::model::{GraphS4Model, Mode, ModelConfig};
use graphs4::tasks::{build_instance, eval_random_mask_score, make_network_mask, trivial_partition, NetworkPartition, TaskSpec};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn partition() -> NetworkPartition {
    let mut networks = BTreeMap::new();
    networks.insert("A".to_string(), vec![0, 4, 5]);
    networks.insert("B".to_string(), vec![1, 2]);
    networks.insert("C".to_string(), vec![3, 6, 7]);
    NetworkPartition::new(8, networks, None).unwrap()
}

fn signal(seed: u64, v: usize, t: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((v, t), |_| rng.random_range(-2.0..2.0))
}

fn specs() -> Vec<TaskSpec> {
    vec![
        TaskSpec::NetworkMask { target_network: "A".into() },
        TaskSpec::NetworkMask { target_network: "C".into() },
        TaskSpec::Forecast { horizon: 5 },
        TaskSpec::RandomMask { mask_fraction: 0.3, num_eval_masks: 3 },
    ]
}

#[test]
fn hidden_content_never_reaches_the_input() {
    let p = partition();
    for seed in 0..20 {
        let x = signal(seed, 8, 16);
        for spec in specs() {
            let inst = build_instance(&x, &spec, &p, seed).unwrap();
            assert_eq!(inst.target, x);
            assert!(inst.loss_mask.iter().any(|&m| m));
            for ((v, m), orig) in inst.input.iter().zip(&inst.loss_mask).zip(&x) {
                assert_eq!(*v, if *m { 0.0 } else { *orig });
            }
            assert_eq!(build_instance(&x, &spec, &p, seed).unwrap(), inst);
        }
    }
}

#[test]
fn network_masks_tile_a_partition() {
    let p = partition();
    let masks: Vec<Vec<bool>> = p.names().iter().map(|n| make_network_mask(&p, n).unwrap()).collect();
    for node in 0..8 {
        assert_eq!(masks.iter().filter(|m| m[node]).count(), 1);
    }
    assert!(make_network_mask(&p, "Z").is_err());
}

#[test]
fn denoise_without_noise_is_identity() {
    let x = signal(1, 8, 12);
    let inst = build_instance(&x, &TaskSpec::Denoise { noise_sigma: 0.0 }, &partition(), 9).unwrap();
    assert_eq!(inst.input, x);
    assert!(inst.loss_mask.iter().all(|&m| m));
    let noisy = build_instance(&x, &TaskSpec::Denoise { noise_sigma: 0.5 }, &partition(), 9).unwrap();
    assert_ne!(noisy.input, x);
}

#[test]
fn forecast_horizon_must_leave_history() {
    let x = signal(2, 8, 10);
    assert!(build_instance(&x, &TaskSpec::Forecast { horizon: 10 }, &partition(), 0).is_err());
    let inst = build_instance(&x, &TaskSpec::Forecast { horizon: 1 }, &partition(), 0).unwrap();
    assert!(inst.loss_mask.rows().into_iter().all(|r| r.iter().rev().skip(1).all(|&m| !m) && r[9]));
}

fn model(v: usize) -> GraphS4Model {
    let cfg = ModelConfig { num_layers: 2, state_dim: 4, channels: 2, diffusion_steps: 1, dropout: 0.1, num_nodes: v, emb_dim: 3, ..Default::default() };
    GraphS4Model::init(&cfg, 4).unwrap()
}

#[test]
fn single_random_mask_score_is_the_instance_mse() {
    let m = model(8);
    let x = signal(3, 8, 16);
    let spec = TaskSpec::RandomMask { mask_fraction: 0.25, num_eval_masks: 1 };
    let inst = build_instance(&x, &spec, &trivial_partition(8), 42).unwrap();
    let pred = m.forward_seq(&inst.input, Mode::Conv).unwrap();
    assert_eq!(eval_random_mask_score(&m, &x, &spec, 42).unwrap(), inst.masked_mse(&pred));
    assert_eq!(eval_random_mask_score(&m, &x, &spec, 42).unwrap(), eval_random_mask_score(&m, &x, &spec, 42).unwrap());
}

#[test]
fn anomaly_score_is_masked_mse_of_eval_prediction() {
    let m = model(8);
    let p = partition();
    let x = signal(5, 8, 16);
    let sample = Sample { id: "s".into(), x: x.clone(), label: Label::Healthy, site: String::new(), split: Split::ClinicalSsVal };
    for spec in specs().into_iter().take(3) {
        let inst = build_instance(&x, &spec, &p, 0).unwrap();
        let pred = m.forward_seq(&inst.input, Mode::Conv).unwrap();
        let want = inst.masked_mse(&pred);
        let got = anomaly_score(&m, &sample, &spec, &p).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!(got >= 0.0 && got.is_finite());
    }
}
