//! Minimal tensor math with manual forward/backward passes, the policy
//! architectures, and an adaptive-moment optimizer.

mod adam;
pub mod gradcheck;
mod ops;
mod policy;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use ops::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, layer_norm_backward,
    layer_norm_forward, log_softmax_row, lstm_step_backward, lstm_step_forward, relu_backward,
    relu_forward, softmax_row, LstmCache, LstmParams,
};
pub use policy::{
    load_checkpoint, save_checkpoint, ForwardTrace, HeadKind, HeadParams, LstmState, NetParams,
    PolicyConfig, PolicyNet, PolicyOutput, CONV1_FILTERS, CONV1_KERNEL, CONV2_FILTERS,
    CONV2_KERNEL, HEAD_FEATURES, LSTM_UNITS, MLP_UNITS,
};
pub use tensor::{NnError, Tensor};
