//! Gradients, the finite-difference oracle, optimizers and the training loop.

mod backward;
mod gradcheck;
mod loss;
mod optim;
mod trainer;

pub use backward::{backward, GradientSet};
pub use gradcheck::{
    compare_gradients, finite_diff_all, finite_diff_grad, grad_check, group_name, relative_error,
    GradCheckEntry, GradCheckReport, DEFAULT_FD_EPS, DEFAULT_GRAD_TOL, REL_ERROR_FLOOR,
};
pub use loss::cross_entropy;
pub use optim::{clip_grad_norm, Optimizer, OptimizerConfig};
pub use trainer::{batch_gradients, train, EvalRecord, MetricsHistory, StepRecord, TrainConfig, Trainer};
