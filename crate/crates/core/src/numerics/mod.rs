//! Dense tensors, the elementary functions the model uses, and the
//! reverse-mode graph that differentiates the training loss.

mod functions;
mod graph;
pub mod io;
mod real;
mod tensor;

pub use functions::{cosine, cross_entropy, logsumexp, mse, softmax, PROB_FLOOR};
pub use graph::{grad, DistanceKind, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
