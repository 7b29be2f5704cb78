//! Task distillation: a synthetic labelled dataset that trains freshly
//! initialized networks into competent control policies in a single step.

pub mod diff;
pub mod distill;
pub mod env;
pub mod eval;
pub mod matrix;
pub mod nets;
pub mod optim;
pub mod ppo;
pub mod rng;

pub use matrix::Matrix;
