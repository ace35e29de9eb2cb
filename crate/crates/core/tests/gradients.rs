mod common;

use common::model_gradcheck;
use common::ops::op_cases;
use ssan_core::attention::Variant;

const TOL: f64 = 1e-4;

#[test]
fn every_op_matches_central_differences() {
    for op in op_cases() {
        let err = op.max_error(5);
        assert!(err < TOL, "{}: relative error {err}", op.name);
    }
}

#[test]
fn full_model_both_variants() {
    for variant in [Variant::Ssan, Variant::San] {
        for draw in 0..20 {
            let r = model_gradcheck(variant, draw, 3);
            assert!(
                r.max_rel_error < TOL,
                "{variant:?} draw {draw}: {} at {:?}",
                r.max_rel_error,
                r.worst
            );
        }
    }
}
