use xview::diagnostics::{micro_model_config, objective_grad_check};
use xview::model::LossOptions;

#[test]
fn full_objective_matches_finite_differences() {
    let check = objective_grad_check(&micro_model_config(), &LossOptions::default(), 11).unwrap();
    println!("{:?} loss {} in {:?}", check.report, check.loss, check.elapsed);
    assert!(check.report.max_rel_error < 1e-4);
}
