#[allow(dead_code)]
#[path = "support/gradcheck.rs"]
mod gradcheck;

const TOL: f64 = 1e-4;

#[test]
fn elbo_gradients_match_finite_differences() {
    let e = gradcheck::elbo();
    assert!(e < TOL, "max relative error {e}");
}

#[test]
fn critic_gradients_with_penalty_match_finite_differences() {
    let e = gradcheck::critic_with_penalty();
    assert!(e < TOL, "max relative error {e}");
}

#[test]
fn generator_gradients_match_finite_differences() {
    let e = gradcheck::generator();
    assert!(e < TOL, "max relative error {e}");
}

#[test]
fn translator_phase_gradients_match_finite_differences() {
    let (a, b) = (gradcheck::phase1(), gradcheck::phase2());
    assert!(a < TOL && b < TOL, "phase 1 {a}, phase 2 {b}");
}

#[test]
fn feature_extractor_gradients_match_finite_differences() {
    let e = gradcheck::feature_extractor();
    assert!(e < TOL, "max relative error {e}");
}
