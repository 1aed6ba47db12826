//! Kernel-convoluted models, Mixup and their combination, trained with a
//! small reverse-mode autodiff engine, plus the evaluation tools around
//! them: adversarial attacks, Rademacher complexity estimates, decision
//! contours and bandwidth sweeps.

pub mod attack;
pub mod autodiff;
pub mod data;
pub mod kernel;
pub mod loss;
pub mod mixup;
pub mod model;
pub mod rademacher;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use tensor::Tensor;
