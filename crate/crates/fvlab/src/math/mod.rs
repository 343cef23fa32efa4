// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tensor arithmetic, deterministic randomness, and reverse-mode
//! differentiation — just enough to train and probe the toy transformer.

pub mod gradcheck;
pub(crate) mod kernels;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use rng::DetRng;
pub use tape::{Grads, NodeId, RowSel, Tape};
pub use tensor::Tensor;
