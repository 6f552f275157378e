//! Micro decoder-only transformer: forward pass, gradients, training,
//! low-rank adapters, decoding and checkpoint I/O.

pub mod adapter;
pub mod checkpoint;
pub mod config;
pub mod generate;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

use thiserror::Error;

pub use adapter::{attention_targets, merge_adapter, AdapterFactors, LowRankAdapter};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Provenance, Tensor};
pub use config::{AdamW, ModelConfig, Precision, Schedule, TrainConfig};
pub use generate::{generate, Decode, Generator};
pub use model::Sequence;
pub use params::{Layout, ParamSet, ProjKind, TensorRole};
pub use train::{encode_example, encode_prompt, loss_and_grads, train_phase, PhaseOutput, TrainingLog};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid model or training config: {0}")]
    InvalidConfig(String),
    #[error("token id {token} out of vocabulary (size {vocab_size})")]
    TokenOutOfVocab { token: u32, vocab_size: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("prompt length {len} leaves no room to generate (max {max})")]
    PromptTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("empty batch")]
    EmptyBatch,
    #[error("every position in the batch is masked out of the loss")]
    NoTargets,
    #[error("tokens not in the model vocabulary: {0:?}")]
    UnknownTokens(Vec<String>),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("freeze mask and adapter cannot both be active")]
    AdapterAndMask,
    #[error("invalid freeze mask: {0}")]
    InvalidMask(String),
    #[error("invalid adapter: {0}")]
    InvalidAdapter(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("checkpoint: bad magic header")]
    BadMagic,
    #[error("checkpoint: format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint: truncated in {0}")]
    Truncated(String),
    #[error("checkpoint: tensor {tensor} needs {expected} bytes, {available} available")]
    ByteCount {
        tensor: String,
        expected: usize,
        available: usize,
    },
    #[error("tensor {tensor}: shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint: missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint: unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("checkpoint: CRC mismatch (stored {stored:#010x}, computed {actual:#010x})")]
    CrcMismatch { stored: u32, actual: u32 },
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Logits and optional per-block activations, in f64.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// `seq x vocab`, row-major.
    pub logits: Vec<f64>,
    /// One `seq x d_model` matrix per block, taken at the block output.
    pub activations: Option<Vec<Vec<f64>>>,
}

pub fn forward(ckpt: &Checkpoint, tokens: &[u32], capture: bool) -> Result<ForwardResult, EngineError> {
    let params = ckpt.params::<f64>()?;
    let (logits, activations) = model::forward_params(&params, None, tokens, capture)?;
    Ok(ForwardResult { logits, activations })
}

/// Forward pass with the adapter composed on the fly (`x W + s (x A) B`),
/// without touching the base tensors.
pub fn forward_with_adapter(
    ckpt: &Checkpoint,
    adapter: &LowRankAdapter,
    tokens: &[u32],
) -> Result<ForwardResult, EngineError> {
    adapter.validate(ckpt)?;
    let params = ckpt.params::<f64>()?;
    let ap = adapter.to_params::<f64>(&params.layout);
    let (logits, activations) = model::forward_params(&params, Some(&ap), tokens, false)?;
    Ok(ForwardResult { logits, activations })
}
