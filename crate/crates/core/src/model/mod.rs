//! The split ReLU network: forward pass, losses, backpropagation, local
//! training, Gram/NTK diagnostics and checkpoints.

pub mod checkpoint;
mod network;
mod ntk;
mod train;

pub use network::{
    classification_accuracy, init_params, mean_loss, relu, relu_grad, sigmoid, ForwardCache,
    LossKind, ModelConfig, ParamTensors, SplitParams, P_CLAMP,
};
pub use ntk::{gram_matrices, normalize_rows, ntk_limit_estimate, GramDiagnostics};
pub use train::{
    run_local_epochs, split_delta, Freeze, LocalTraining, LocalUpdate, PersonalDelta, RowBlock,
    SharedDelta,
};

#[cfg(test)]
mod tests;
