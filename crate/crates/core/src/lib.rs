//! Core of a desk-scale vision-and-language transformer framework.
//!
//! Everything here is `no_std` + `alloc`: a reverse-mode autodiff engine
//! over float64 tensors, the procedural image-caption corpus, unimodal
//! encoders, merged-attention and co-attention fusion, the encoder-decoder
//! variant, the pre-training objectives, AdamW with layered learning
//! rates, a deterministic training loop and the checkpoint byte format.
//! File IO, wall clocks and the CLI live in the `meter` crate.

#![no_std]

extern crate alloc;

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{Group, Init, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
