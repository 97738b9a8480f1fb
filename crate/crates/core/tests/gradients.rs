mod common;

use common::gradcases::{self, TOLERANCE};
use common::GradCheck;

fn assert_close(name: &str, check: GradCheck) {
    assert!(
        check.relative_error < TOLERANCE,
        "{name}: relative error {} over {} values",
        check.relative_error,
        check.checked
    );
}

#[test]
fn residual_chain() {
    assert_close("residual chain", gradcases::residual_chain_case());
}

#[test]
fn communication_block() {
    assert_close("communication block", gradcases::communication_block_case());
}

#[test]
fn fusion_block() {
    assert_close("fusion block", gradcases::fusion_block_case());
}

#[test]
fn cae_encoder() {
    assert_close("cae encoder", gradcases::cae_encoder_case());
}

#[test]
fn socae_encoder() {
    assert_close("socae encoder", gradcases::socae_encoder_case());
    assert_close("socae encoder without cb", gradcases::socae_encoder_without_cb_case());
}

#[test]
fn decoder() {
    assert_close("decoder", gradcases::decoder_case());
}

#[test]
fn unet() {
    assert_close("unet", gradcases::unet_case());
}

#[test]
fn reconstruction_loss() {
    assert_close("mse", gradcases::reconstruction_loss_case());
}

#[test]
fn weighted_bce() {
    assert_close("weighted bce", gradcases::weighted_bce_case());
}

#[test]
fn cosine_distance() {
    assert_close("cosine distance", gradcases::cosine_distance_case());
}

#[test]
fn total_objective() {
    assert_close("total objective", gradcases::total_objective_case());
}
