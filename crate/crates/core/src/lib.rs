#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod float;
pub mod generator;
pub mod graph;
pub mod identity;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod perceptual;
pub mod pretrain;
pub mod resample;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use float::Float;
pub use graph::{ConvSpec, Gradients, Graph, Var};
pub use tensor::Tensor;
