//! Dense tensors, a reverse-mode tape, AdamW and finite-difference checks.

mod gradcheck;
mod optim;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad_check, GradCheckReport};
pub use optim::AdamW;
pub use rng::Rng;
pub use tape::{js_row, AttnMask, Gradients, Tape, Var};
pub use tensor::{softmax, Float, Tensor};
