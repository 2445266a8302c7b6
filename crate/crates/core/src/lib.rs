//! Quadrangle attention for vision transformers.
//!
//! Window attention partitions a feature map into fixed `w×w` windows. Quadrangle
//! attention keeps the window partition for queries but lets every window and
//! head predict a projective transform; keys and values are bilinearly sampled
//! from the transformed (quadrangle) region. With a zero-initialized prediction
//! head the transform is the identity and the layer reduces exactly to window
//! attention.
//!
//! The crate carries its own small reverse-mode engine ([`autodiff`]) so every
//! piece, including the sampler and the projective geometry, is differentiable
//! end to end and can be checked against finite differences ([`gradcheck`]).

// `!(x >= 0.0)` rejects NaN along with negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod array;
pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod model;
pub mod quad;
pub mod sample;
pub mod synth;
pub mod train;
pub mod windowing;

pub use array::DenseArray;
pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
