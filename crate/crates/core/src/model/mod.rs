//! LLaMA-style decoder (pre-RMSNorm, rotary attention, SwiGLU) whose depth
//! prefixes are usable sub-models sharing one final norm and output head.

mod backward;
mod config;
mod forward;
pub mod ops;
mod params;

pub use config::{ExitSet, ModelConfig};
pub use forward::{
    block_forward, forward_exits, forward_exits_with, forward_single, forward_single_with, ExitOutput, ExitOutputs,
    HeadSource, TokenBatch,
};
pub use ops::rms_norm;
pub use params::{BlockParams, ExitHead, InitScheme, Parameters, PerExitHeads};

pub(crate) use backward::{backward_sequence, exit_backward};
pub(crate) use forward::run_sequence;
