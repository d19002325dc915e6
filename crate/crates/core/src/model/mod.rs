//! Character-level tokenizer and the decoder-only transformer shared by the
//! Predictor, Generator and PredGen regimes.

pub mod checkpoint;
pub mod transformer;
pub mod vocab;

pub use checkpoint::{Checkpoint, RngState};
pub use transformer::{
    forward, forward_packed, generate, generate_batch, init_params, pool, rollout_batch,
    sequence_log_prob, Generation, HiddenStates, ModelConfig, PackedForward, PoolSpec,
};
pub use vocab::{SequenceRole, TokenSequence, Vocab};
