use graphs4::training::gradcheck::{check_model_gradients, check_operations, GradCheckConfig};

#[test]
fn operations_match_finite_differences() {
    let report = check_operations(&GradCheckConfig::default()).unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn full_model_matches_finite_differences() {
    let report = check_model_gradients(&GradCheckConfig::default()).unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn other_seeds_and_depths() {
    for seed in [1, 2] {
        let cfg = GradCheckConfig { seed, diffusion_steps: 2, num_layers: 1, ..Default::default() };
        let report = check_model_gradients(&cfg).unwrap();
        assert!(report.passed(), "seed {seed}\n{report}");
    }
}

#[test]
fn every_tensor_is_checked() {
    let report = check_model_gradients(&GradCheckConfig::default()).unwrap();
    for name in ["emb", "layers.0.ssm.lambda", "layers.1.mix.1", "cls_head.w", "input_proj"] {
        assert!(report.entries.iter().any(|e| e.name.ends_with(name)), "{name}");
    }
    let ops = check_operations(&GradCheckConfig::default()).unwrap();
    let sm = ops.entries.iter().find(|e| e.name == "graph_mixing.sparsemax").unwrap();
    assert!(sm.passed);
}
