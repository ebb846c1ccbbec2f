//! Dense f64 kernels and the reverse-mode tape the models train with.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::check_gradients;
pub use matrix::{cross_entropy, softmax, Matrix, PROB_FLOOR};
pub use tape::{lstm_step, NamedGrads, NodeId, Tape};
