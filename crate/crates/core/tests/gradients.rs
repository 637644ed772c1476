use std::time::Instant;

use explab::gradcheck::Precision;
use explab::gradsuite::{run_suite, tolerance, Case, ALL_CASES};

fn check(precision: Precision, seed: u64) {
    let reports = run_suite(precision, seed).unwrap();
    assert_eq!(reports.len(), ALL_CASES.len());
    for (case, r) in reports {
        assert!(
            r.max_rel_error < tolerance(precision),
            "{} ({precision:?}, seed {seed}): {r:?}",
            case.name()
        );
    }
}

#[test]
fn every_op_and_model_f32() {
    check(Precision::F32, 0);
}

#[test]
fn every_op_and_model_f64() {
    check(Precision::F64, 0);
}

#[test]
fn other_seeds() {
    for seed in [1, 7] {
        check(Precision::F32, seed);
        check(Precision::F64, seed);
    }
}

#[test]
fn model_case_is_fast() {
    let t = Instant::now();
    let c = Case::Model;
    let params = c.params(0).unwrap();
    explab::gradcheck::grad_check(&c, &params, explab::gradsuite::options(Precision::F32)).unwrap();
    assert!(t.elapsed().as_secs() < 60);
}

#[test]
fn key_bias_gradient_is_zero() {
    use explab::gradsuite::key_bias_gradient;
    assert!(key_bias_gradient::<f64>(0).unwrap() < 1e-12);
    assert!(key_bias_gradient::<f32>(0).unwrap() < 1e-5);
}
