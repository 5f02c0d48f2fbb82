//! Dense tensors, a reverse-mode tape, small MLPs and Adam.

mod mlp;
mod optim;
mod tape;
mod tensor;

pub use mlp::{Activation, Linear, MlpParams, MlpVars};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use tape::{cross_entropy, cross_entropy_rows, mse, softmax, Gradients, Tape, Var};
pub use tensor::{argmax, Tensor};
