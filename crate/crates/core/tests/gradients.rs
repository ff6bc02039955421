mod common;

use common::grad_case;
use emovec::distill::loss::UttVariant;
use emovec::model::BackboneStyle;

// Finite-difference agreement for every style and variant is checked by
// the acceptance suite.

#[test]
fn teacher_receives_no_gradient_path() {
    // Perturbing the teacher changes the loss, but the gradient buffer only
    // ever holds student arrays and the teacher is left untouched.
    let case = grad_case(BackboneStyle::Standard, UttVariant::Chunk);
    let before = case.teacher.checksum();
    let _ = case.analytic();
    assert_eq!(case.teacher.checksum(), before);
}

