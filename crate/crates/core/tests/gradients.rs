//! Backpropagated gradients against central finite differences, in f64.

mod common;

use semcom::Result;

#[test]
fn convolutional_codec_gradients() -> Result<()> {
    common::check_convolutional_codec()
}

#[test]
fn windowed_attention_codec_gradients() -> Result<()> {
    common::check_windowed_attention_codec()
}

#[test]
fn latent_losses_gradients() -> Result<()> {
    common::check_latent_losses()
}

#[test]
fn residual_objective_gradients() -> Result<()> {
    common::check_residual_objective()
}

#[test]
fn similarity_objective_gradients_stay_in_similarity_branch() -> Result<()> {
    common::check_similarity_objective()
}

#[test]
fn end_to_end_gradients_through_channel() -> Result<()> {
    common::check_end_to_end()
}
