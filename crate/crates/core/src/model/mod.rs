//! The shared dual-mode model: Conformer-lite encoder with convolutional
//! subsampling front-end, Transformer-lite decoder, CTC head, parameter
//! initialization, and checkpoint persistence/averaging.
//!
//! One parameter set serves both the streaming and full-context modes; the
//! only run-time difference between them is the encoder self-attention mask.
//! The depthwise convolution inside every encoder block is causal in both
//! modes, so masking really is the only difference.

mod checkpoint;
mod decoder;
mod encoder;
mod params;

pub use checkpoint::{average_checkpoints, Checkpoint};
pub use decoder::{ctc_head, decoder_forward};
pub use encoder::{encode, positional_encoding, SUBSAMPLE_RECEPTIVE_FIELD, SUBSAMPLE_STRIDE};
pub use params::{bind_params, init_params, param_manifest, BoundParams, InitKind, ParamSpec, Parameters};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model hyperparameters. Desk-scale defaults; the vocabulary size is the
/// number of real tokens (CTC adds a blank class, the decoder adds blank and
/// a shared sos/eos).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub conv_kernel: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat_dim: 16,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            n_enc_layers: 2,
            n_dec_layers: 2,
            conv_kernel: 7,
            vocab_size: 12,
            dropout: 0.0,
            label_smoothing: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.feat_dim,
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.n_enc_layers,
            self.n_dec_layers,
            self.conv_kernel,
            self.vocab_size,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("all model dimensions must be >= 1"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid("label smoothing must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn vocab(&self) -> crate::data::VocabSpec {
        crate::data::VocabSpec::new(self.vocab_size)
    }
}

/// One subsampling stage: kernel 3, stride 2, no padding.
fn conv_stage_len(n: usize) -> usize {
    (n - 3) / 2 + 1
}

/// Post-subsampling length after the two stride-2 kernel-3 stages.
/// Inputs shorter than 7 frames do not survive.
pub fn sub_len(t: usize) -> Result<usize> {
    if t < 7 {
        return Err(Error::TooShortAfterSubsampling(t));
    }
    Ok(conv_stage_len(conv_stage_len(t)))
}
