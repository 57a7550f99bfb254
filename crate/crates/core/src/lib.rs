//! Strict layer-output manipulation (SLOM) attacks on small convolutional
//! networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors, the layer kernels and a tape-based
//!   reverse-mode [`Graph`](tensor::Graph).
//! - [`network`]: architecture descriptions, weight initialisation and
//!   persistence, forward execution with a tap point.
//! - [`training`]: IDX loading, minibatch SGD and the five-member oracle
//!   ensemble.
//! - [`attack`]: the attack engine (type I / type II objectives, schedules,
//!   traced gradient descent on the input).
//! - [`structural`]: underconstraint tests for conv/pool blocks, the decoupled
//!   pooling and ReLU objectives and the perturbation amplification model.
//! - [`par`]: the data-parallel helpers used by everything above; they fall
//!   back to sequential iteration when the `parallel` feature is off.

pub mod attack;
pub mod network;
pub mod par;
pub mod structural;
pub mod tensor;
pub mod training;

pub use attack::{AttackConfig, AttackKind, AttackResult, LambdaSchedule, StepSchedule};
pub use network::{LayerSpec, Network, NetworkSpec, Padding, TapKind, TapPoint};
pub use tensor::{Graph, Tensor, TensorError, Var};
pub use training::{Dataset, Oracle};
