//! Attentional pooling as low-rank second-order pooling.
//!
//! The crate scores a feature map `X` (`n` locations by `f` channels) with a
//! rank-1 approximation of a bilinear classifier, `aᵀ Xᵀ X b`, and compares it
//! with full second-order pooling, average pooling and compact bilinear
//! (TensorSketch) pooling. It also provides a small reverse-mode autograd, a
//! planted-signal synthetic task, training, metrics and cost benchmarks.

pub mod alloc_track;
pub mod atnp;
pub mod attnpool;
pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod flops;
pub mod heads;
pub mod heatmap;
pub mod metrics;
pub mod parallel;
pub mod pose;
pub mod rng;
pub mod selftest;
pub mod sketch;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use heads::{HeadConfig, HeadKind, LossKind, Model};
pub use parallel::Execution;
pub use tensor::Matrix;
