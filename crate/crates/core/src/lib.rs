//! Knowledge-review distillation for CIFAR-style ResNets.
//!
//! The crate is self-contained: [`tensor`] provides the numeric kernels and a
//! reverse-mode tape, [`models`] builds ResNet / Wide-ResNet students and
//! teachers, [`review`] holds the fusion units and feature losses that move
//! knowledge from teacher to student, and [`training`] runs the optimisation
//! recipe. [`oracles`] contains slow reference implementations used to test
//! the fast paths.

pub mod data;
pub mod error;
pub mod models;
pub mod oracles;
pub mod review;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Precision, Real, Tensor};
