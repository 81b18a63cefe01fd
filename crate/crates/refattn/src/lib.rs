//! Reference-based super-resolution with deformable texture transfer.
//!
//! The crate super-resolves a low-resolution image by borrowing texture from
//! a high-resolution reference photo: multi-scale feature encoders, top-K
//! cosine patch matching, deformable attention that warps reference features
//! with learned offsets and masks, and a windowed-attention U-Net that
//! aggregates everything into the output. A small 64-bit reverse-mode tape
//! underneath makes the whole stack differentiable and finite-difference
//! checkable at desk scale.
//!
//! Start with the runnable examples (`cargo run --release --example ...`) or
//! the `refattn` binary, which exposes `match`, `transfer`, `sr`,
//! `train-toy`, `gradcheck` and `selftest` subcommands.

pub mod aggregate;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod matcher;
pub mod num;
pub mod pipeline;
pub mod rda;

pub use error::{Error, Result};
pub use num::NdArray;
