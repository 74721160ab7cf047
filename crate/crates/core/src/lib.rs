//! Factorizer segmentation models: differentiable NMF layers, matricize
//! operators, Factorizer blocks and a U-shaped network, with the training,
//! inference and ablation machinery around them.

pub mod ablate;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod infer;
pub mod inspect;
pub mod loss;
pub mod matricize;
pub mod metrics;
pub mod network;
pub mod nmf;
pub mod optim;
pub mod params;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
