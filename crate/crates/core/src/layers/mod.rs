//! Parameterized layers: the recurrent convolutional layer, batch
//! normalization, dropout and the softmax classifier head.
//!
//! Each layer has a tape-level form used by models and a standalone form
//! that evaluates directly on tensors.

mod batch_norm;
mod chain;
mod classifier;
mod dropout;
mod rcl;

pub use batch_norm::{batch_norm, update_running_stats, BatchNormParams, BN_EPSILON, BN_MOMENTUM};
pub use chain::{untied_chain_on_tape, ChainWiring};
pub use classifier::{classifier_forward, classifier_on_tape, ClassifierParams};
pub use dropout::dropout;
pub use rcl::{rcl_forward, rcl_on_tape, RclParams, RclVars};

/// Whether a forward pass is training, evaluating, or probing activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates, live dropout.
    Train,
    /// Running statistics, dropout inert.
    Infer,
    /// Batch statistics without running-stat updates; dropout inert. Used by
    /// initialization probes.
    Calibrate,
}

impl Mode {
    pub fn uses_batch_stats(self) -> bool {
        matches!(self, Mode::Train | Mode::Calibrate)
    }

    pub fn dropout_active(self) -> bool {
        self == Mode::Train
    }
}
