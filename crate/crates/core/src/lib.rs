//! Scale-complementary learning detector core.
//!
//! Everything in this crate is pure computation over in-memory buffers and
//! builds without `std` (an allocator is required). File formats, PNG
//! encoding, configuration files and the command line live in the companion
//! `sclnet` crate.
//!
//! Layout:
//!
//! - [`tensor`], [`graph`], [`kernels`]: dense tensors and a tape-based
//!   reverse-mode autodiff engine with the handful of fused operators the
//!   detector needs (convolution, batch norm, pixel shuffle, deformable
//!   sampling, RoI align, multi-head attention, losses).
//! - [`data`]: boxes, annotations, the synthetic scale-variation generator and
//!   dataset scale statistics.
//! - [`encoder`]: backbone plus top-down pyramid.
//! - [`cscl`]: scale-complementary decoder, Gaussian scale targets, their
//!   loss and the additive fusion into the detection pyramid.
//! - [`iccl`]: max-IoU assignment, intra-category grouping and the
//!   large-to-small contrastive complement branch with its two losses.
//! - [`detector`]: proposals, cascade head, loss composition, SGD training
//!   step and inference.
//! - [`eval`]: IoU, Q-point AP/AR, scale buckets and false-alarm rate.
#![no_std]

extern crate alloc;

pub mod boxes;
pub mod cscl;
pub mod data;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod iccl;
pub mod kernels;
pub mod params;
pub mod real;
pub mod tensor;

pub use boxes::BBox;
pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
