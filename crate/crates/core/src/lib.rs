//! Monaural speech separation with a convolution-augmented gated attention
//! masking network, built on a small reverse-mode autodiff core.

pub mod ablation;
pub mod attention;
pub mod block;
pub mod checkpoint;
pub mod config;
pub mod conv_module;
pub mod data;
pub mod encoder_decoder;
pub mod error;
pub mod graph;
pub mod loss;
pub mod masking_net;
pub mod model;
pub mod numerics;
pub mod separate;
pub mod train;
pub mod wav;

pub use config::{ModelConfig, Preset, TrainConfig};
pub use error::{Error, Result};
pub use model::{count_parameters, MossFormer};
