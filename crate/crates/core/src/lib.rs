//! Desk-scale gradient-inversion laboratory.
//!
//! The crate simulates a FedSGD exchange at batch size 1, captures the honest-
//! but-curious server's view of a client step (parameter gradients only), and
//! reconstructs the client's image from that capture with the DLG, GGI, CPL
//! and MGIC strategies. Everything is f64 and deterministic given seeds.

pub mod attack;
pub mod error;
pub mod fl;
pub mod imaging;
pub mod model;
pub mod optim;
pub mod rng;
pub(crate) mod serialize;
pub mod tensor;

#[cfg(any(test, feature = "testkit"))]
pub mod testkit;

pub use error::{Error, Result};
pub use serialize::fnv1a;
pub use tensor::{grad_of_grads, Tape, Tensor, Val};
