//! Finite-difference checks of the composite training losses.

mod common;

use common::losses;

#[test]
fn pretraining_loss_joint_plus_reconstruction() {
    losses::pretraining().unwrap();
}

#[test]
fn joint_loss_wrt_both_feature_matrices() {
    losses::joint().unwrap();
}

#[test]
fn selector_loss_wrt_heads_and_target() {
    losses::selector().unwrap();
}

#[test]
fn generator_loss_through_fusion_and_decoders() {
    losses::generator().unwrap();
}

#[test]
fn imle_loss_through_the_latent_generator() {
    losses::imle().unwrap();
}
