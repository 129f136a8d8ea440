//! Allocation-only core of the encoder lab.
//!
//! Everything here is pure computation over in-memory data: a small
//! reverse-mode autodiff tape, a LLaMA-style decoder whose attention mask is
//! chosen per call, LoRA adapters, the masked-next-token and contrastive
//! objectives, pooling, probing and the representation analyses. File
//! formats, checkpoints and the CLI live in the `enclab` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod lora;
pub mod objectives;
pub mod optim;
pub mod pool;
pub mod probe;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod transformer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use rng::Rng;
pub use scalar::Real;
pub use tensor::Tensor;
