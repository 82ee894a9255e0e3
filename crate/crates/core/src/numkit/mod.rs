//! Dense numeric kernel: matrices, a reverse-mode tape, and optimizers.

mod matrix;
mod optim;
mod tape;

pub use matrix::Matrix;
pub use optim::{sgd_step, sgd_step_in_place, Adam, GradMask};
pub use tape::{softmax_cross_entropy, Gradients, Tape, Var};
