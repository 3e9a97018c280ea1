//! Small reverse-mode differentiation core: dense `f64` tensors, a recording
//! tape, MLP and LSTM building blocks, optimizers and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::{Checkpoint, StoredTensor};
pub use gradcheck::{grad_check, split_flat};
pub use nn::{
    collect_grads, cross_entropy, lstm_step, mlp_forward, softmax, Activation, BoundLstm,
    BoundMlp, CrossEntropy, Linear, LstmParams, MlpParams, Parameters,
};
pub use optim::{clip_grad_norm, Adam, SgdMomentum};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
