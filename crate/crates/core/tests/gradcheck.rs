use lit4_core::config::{ModelConfig, ResolvedConfig};
use lit4_core::gradcheck::suite::{block_suite, end_to_end, op_suite, SuiteResult};
use lit4_core::gradcheck::{check_gradients, relative_error, GradCheckOptions};
use lit4_core::tensor::Tensor;

fn toy(name: &str) -> ResolvedConfig {
    ModelConfig::load(format!("../../configs/{name}.json").as_ref())
        .unwrap()
        .resolve()
        .unwrap()
}

fn failures(results: &[SuiteResult]) -> Vec<String> {
    results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{}: {:e}", r.name, r.report.max_rel_err()))
        .collect()
}

#[test]
fn every_op_passes() {
    let r = op_suite(None, &GradCheckOptions::default()).unwrap();
    assert!(r.len() >= 10);
    assert!(failures(&r).is_empty(), "{:?}", failures(&r));
}

#[test]
fn every_block_passes() {
    let r = block_suite(None, &GradCheckOptions::default()).unwrap();
    assert!(failures(&r).is_empty(), "{:?}", failures(&r));
}

#[test]
fn full_toy_models_pass() {
    let opts = GradCheckOptions {
        max_coords: Some(4),
        ..Default::default()
    };
    for name in ["toy_xcit_nano", "toy_vit_tiny", "toy_mobilevit_s"] {
        let r = end_to_end(&toy(name), None, &opts).unwrap();
        assert!(r.passed(), "{name}: {:?}", r.report.worst());
    }
}

#[test]
fn a_tenth_of_a_percent_matmul_error_is_caught() {
    let r = op_suite(Some(("matmul", 1.001)), &GradCheckOptions::default()).unwrap();
    let bad = failures(&r);
    assert!(bad.iter().any(|s| s.starts_with("matmul")), "{bad:?}");
}

#[test]
fn corrupted_softmax_fails_the_blocks() {
    let r = block_suite(Some(("softmax", 1.01)), &GradCheckOptions::default()).unwrap();
    assert!(!failures(&r).is_empty());
}

#[test]
fn relative_error_definition() {
    assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
    assert!((relative_error(&[1.0, 2.0], &[1.0, 2.002]) - 0.002 / 2.002).abs() < 1e-15);
    // both tiny: measured against the absolute floor
    assert!(relative_error(&[0.0], &[1e-9]) <= 1e-3);
}

#[test]
fn checker_accepts_a_known_gradient() {
    // f(x) = sum(x * x), checked through the tape
    let x = Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap();
    let report = check_gradients(
        &[x],
        |tape, vars| {
            let sq = tape.mul(vars[0], vars[0])?;
            tape.sum(sq)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{}", report.max_rel_err());
    assert_eq!(report.coords_checked, 3);
}
