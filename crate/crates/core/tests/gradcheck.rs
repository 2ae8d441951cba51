use cll_core::gradcheck::{check_fcll_decode_step, check_fcll_per_tensor, check_primitive, GradCheck};
use cll_core::PrimitiveKind;

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-4;
const TRIALS: u64 = 100;

#[test]
fn every_primitive_matches_central_differences() {
    for kind in PrimitiveKind::ALL {
        let mut total = GradCheck::default();
        for trial in 0..TRIALS {
            total.merge(check_primitive(kind, trial, EPS).unwrap());
        }
        assert!(total.checked > 0, "{kind:?}: nothing checked");
        assert!(
            total.max_rel_err <= TOL,
            "{kind:?}: max relative error {:e} at {}",
            total.max_rel_err,
            total.worst
        );
    }
}

#[test]
fn fcll_decode_step_loss_matches_central_differences() {
    let mut total = GradCheck::default();
    for trial in 0..TRIALS {
        total.merge(check_fcll_decode_step(trial, 4, EPS).unwrap());
    }
    assert!(total.checked >= 300);
    assert!(total.max_rel_err <= TOL, "max relative error {:e} at {}", total.max_rel_err, total.worst);
}

#[test]
fn every_fcll_parameter_tensor_matches_central_differences() {
    let mut total = GradCheck::default();
    for trial in 0..TRIALS {
        total.merge(check_fcll_per_tensor(trial, EPS).unwrap());
    }
    // Kinks should be rare at this eps.
    assert!(total.skipped * 10 < total.checked, "skipped {} of {}", total.skipped, total.checked);
    assert!(total.max_rel_err <= TOL, "max error {:e} at {}", total.max_rel_err, total.worst);
}
