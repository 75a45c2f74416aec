//! Sorted fine-tuning (summed multi-exit loss), the full-depth SFT baseline,
//! early-exit head adaptation and the gradient checker.

mod gradcheck;
mod heads;
mod loss;
mod optimizer;
mod train;

pub use gradcheck::{gradient_check, relative_error, GradCheckConfig, GradCheckReport};
pub use heads::{adapt_exit_heads, AdaptReport};
pub use loss::{sorted_objective, token_cross_entropy, LossBreakdown};
pub use optimizer::{apply_update, step_tensors, OptimizerConfig, OptimizerKind, OptimizerState};
pub use train::{train, TrainConfig, TrainMode, TrainReport, ValidationPoint, REPORT_SCHEMA_VERSION};

pub(crate) use loss::cross_entropy_rows;
