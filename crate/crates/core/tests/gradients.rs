//! Analytic gradients against central finite differences on tiny instances.

mod common;

use common::{cae_gradient_check, closed_set_gradient_check, GradCheck};
use coreseg::reconstruction::NonMatchMode;

const REL: f64 = 1e-3;

fn assert_close(what: &str, g: GradCheck) {
    println!("{what}: {} parameters, worst relative error {:.2e}", g.checked, g.worst_relative);
    assert!(
        g.non_negligible * 2 > g.checked,
        "only {} of {} gradients are non-negligible",
        g.non_negligible,
        g.checked
    );
    assert!(g.worst_relative < REL, "worst relative error {}", g.worst_relative);
}

#[test]
fn closed_set_cross_entropy_gradient() {
    assert_close("closed-set", closed_set_gradient_check());
}

#[test]
fn cae_literal_gradient() {
    assert_close("cae literal", cae_gradient_check(NonMatchMode::Literal, -0.3));
}

#[test]
fn cae_hinge_gradient() {
    assert_close("cae hinge", cae_gradient_check(NonMatchMode::Hinge { margin: 0.3 }, 0.5));
}
