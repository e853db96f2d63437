//! Minimal reverse-mode differentiation for the meta-model: a tape of the
//! handful of layers it needs, plus Adam, a plateau scheduler and a
//! finite-difference gradient checker.

mod gradcheck;
mod graph;
pub(crate) mod linalg;
mod optim;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, Probe};
pub use graph::{kl_div_loss, log_softmax, Graph, KlDirection, Pool, Var};
pub use optim::{Adam, PlateauScheduler};
pub use tensor::Tensor;
