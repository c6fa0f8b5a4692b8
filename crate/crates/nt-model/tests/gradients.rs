//! Central-difference verification of every trainable gradient path, in f64.
//! The check builders live in `nt_model::checks` so the acceptance report
//! runs the identical graphs.

use nt_core::gradcheck::{GradCheckReport, DEFAULT_TOLERANCE};
use nt_model::checks;

fn assert_passes(report: &GradCheckReport) {
    assert!(
        report.passes(DEFAULT_TOLERANCE),
        "max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn adapter_chain_gradients_match_finite_differences() {
    assert_passes(&checks::adapter_chain_report().unwrap());
}

#[test]
fn mask_decoder_dice_gradients_match_finite_differences() {
    assert_passes(&checks::decoder_dice_report().unwrap());
}

#[test]
fn generation_head_mse_gradients_match_finite_differences() {
    assert_passes(&checks::gen_head_report().unwrap());
}

#[test]
fn single_layer_model_gradients_match_finite_differences() {
    assert_passes(&checks::single_layer_model_report().unwrap());
}
