//! Lightweight transformer visual question answering.
//!
//! A small dense-tensor engine with reverse-mode differentiation
//! ([`tape`]), the attention and transformer blocks built on it ([`nn`]),
//! the text and image encoders, the fusion/classification head, static
//! parameter and FLOP accounting ([`cost`]) and a toy-scale training
//! harness ([`train`]).

pub mod archive;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod image;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{DType, Scalar, Tensor};
